//! Oriented derivative-of-Gaussian edge energy.

use crate::error::{Error, Result};

/// Mirror index into `0..n` without repeating the edge sample.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

fn radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil().max(1.0) as usize
}

/// Sampled Gaussian on `[-r, r]`, `r = ceil(3 sigma)`, normalized to sum 1.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = radius(sigma) as isize;
    let g: Vec<f64> = (-r..=r).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Sampled Gaussian derivative, scaled so that correlating with the ramp
/// `f(t) = t` gives exactly 1.
pub fn derivative_of_gaussian(sigma: f64) -> Vec<f64> {
    let r = radius(sigma) as isize;
    let g = gaussian_kernel(sigma);
    let raw: Vec<f64> = (-r..=r).zip(&g).map(|(t, gv)| t as f64 * gv).collect();
    let moment: f64 = (-r..=r).zip(&raw).map(|(t, v)| t as f64 * v).sum();
    raw.into_iter().map(|v| v / moment).collect()
}

fn correlate_rows(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(t, kv)| kv * row[reflect_index(x as isize + t as isize - r, w)])
                .sum();
        }
    }
    out
}

fn correlate_cols(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (t, kv) in k.iter().enumerate() {
            let sy = reflect_index(y as isize + t as isize - r, h);
            let srow = &src[sy * w..(sy + 1) * w];
            out[y * w..(y + 1) * w].iter_mut().zip(srow).for_each(|(o, s)| *o += kv * s);
        }
    }
    out
}

/// Per pixel, the largest magnitude of the directional derivative over
/// `orientations` equally spaced angles `k pi / orientations`.
pub fn oriented_edge_energy(map: &[f64], h: usize, w: usize, sigma: f64, orientations: usize) -> Result<Vec<f64>> {
    if map.len() != h * w {
        return Err(Error::Shape(format!("map of {} values is not {h}x{w}", map.len())));
    }
    if !(sigma > 0.0) || orientations == 0 {
        return Err(Error::InvalidArgument("sigma and orientation count must be positive".into()));
    }
    let g = gaussian_kernel(sigma);
    let dg = derivative_of_gaussian(sigma);
    let rx = correlate_cols(&correlate_rows(map, h, w, &dg), h, w, &g);
    let ry = correlate_rows(&correlate_cols(map, h, w, &dg), h, w, &g);
    let dirs: Vec<(f64, f64)> = (0..orientations)
        .map(|k| {
            let th = k as f64 * std::f64::consts::PI / orientations as f64;
            (th.cos(), th.sin())
        })
        .collect();
    Ok(rx
        .iter()
        .zip(&ry)
        .map(|(&a, &b)| dirs.iter().map(|(c, s)| (c * a + s * b).abs()).fold(0.0, f64::max))
        .collect())
}
