//! Generated two-region images with known boundaries, for smoke tests and
//! benchmark fixtures.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image_io::ImageSample;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TwoRegionImage {
    pub image: ImageSample,
    /// `true` for pixels on the positive side of the dividing line.
    pub labels: Vec<bool>,
    /// One-pixel-wide boundary: positive-side pixels with a 4-neighbor on the other side.
    pub boundary: Vec<bool>,
}

impl TwoRegionImage {
    pub fn height(&self) -> usize {
        self.image.height()
    }

    pub fn width(&self) -> usize {
        self.image.width()
    }
}

/// A straight boundary at a random angle through a point near the centre,
/// separating two colors that differ by `contrast` in every channel, plus
/// Gaussian pixel noise of standard deviation `noise`.
pub fn two_region_image<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    contrast: f64,
    noise: f64,
    rng: &mut R,
) -> Result<TwoRegionImage> {
    if h < 4 || w < 4 {
        return Err(Error::InvalidArgument("two-region images need at least 4x4 pixels".into()));
    }
    if !(contrast > 0.0 && contrast < 0.8) {
        return Err(Error::InvalidArgument(format!("contrast {contrast} outside (0, 0.8)")));
    }
    let gauss = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    loop {
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let spread = 0.2 * h.min(w) as f64;
        let cy = h as f64 / 2.0 + rng.random_range(-spread..=spread);
        let cx = w as f64 / 2.0 + rng.random_range(-spread..=spread);
        let (s, c) = theta.sin_cos();
        let labels: Vec<bool> = (0..h * w)
            .map(|i| {
                let y = (i / w) as f64 + 0.5;
                let x = (i % w) as f64 + 0.5;
                (x - cx) * c + (y - cy) * s > 0.0
            })
            .collect();
        let positive = labels.iter().filter(|&&l| l).count();
        if positive < h * w / 10 || positive > h * w - h * w / 10 {
            continue;
        }
        let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9 - contrast));
        let b: [f64; 3] = std::array::from_fn(|ch| a[ch] + contrast);
        // which region gets the brighter color, per channel
        let flip: [bool; 3] = std::array::from_fn(|_| rng.random_bool(0.5));
        let mut data = vec![0.0; 3 * h * w];
        for ch in 0..3 {
            for i in 0..h * w {
                let base = if labels[i] != flip[ch] { a[ch] } else { b[ch] };
                data[ch * h * w + i] = (base + gauss.sample(rng)).clamp(0.0, 1.0);
            }
        }
        let boundary = boundary_of(&labels, h, w);
        let image = ImageSample::new(Tensor::new(vec![3, h, w], data)?, "synthetic")?;
        return Ok(TwoRegionImage {
            image,
            labels,
            boundary,
        });
    }
}

/// Pixels labelled `true` with a 4-neighbor labelled `false`.
pub fn boundary_of(labels: &[bool], h: usize, w: usize) -> Vec<bool> {
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            labels[i]
                && ((y > 0 && !labels[i - w])
                    || (y + 1 < h && !labels[i + w])
                    || (x > 0 && !labels[i - 1])
                    || (x + 1 < w && !labels[i + 1]))
        })
        .collect()
}
