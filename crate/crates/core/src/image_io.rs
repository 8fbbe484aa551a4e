//! Image decoding, random cropping and PNG export.

use std::path::Path;

use image::{ImageBuffer, ImageFormat, ImageReader, Luma, Rgb};
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{resize_bilinear, Tensor};

/// An RGB image as a `[3, H, W]` tensor with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub pixels: Tensor,
    pub source: String,
    /// Top-left corner of the crop in the (possibly upscaled) source image.
    pub origin: (usize, usize),
}

impl ImageSample {
    pub fn new(pixels: Tensor, source: impl Into<String>) -> Result<Self> {
        let (c, _, _) = pixels.dims3()?;
        if c != 3 {
            return Err(Error::Shape(format!("image must have 3 channels, got {c}")));
        }
        Ok(ImageSample {
            pixels,
            source: source.into(),
            origin: (0, 0),
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[2]
    }
}

fn open_checked(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Jpeg) => {}
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported image format {other:?} (expected PNG or JPEG)",
                path.display()
            )))
        }
    }
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// Decodes a PNG or JPEG file. Grayscale inputs are replicated to three
/// channels and every bit depth is scaled to `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageSample> {
    let path = path.as_ref();
    let rgb = open_checked(path)?.to_rgb32f();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = (px.0[c] as f64).clamp(0.0, 1.0);
        }
    }
    ImageSample::new(Tensor::new(vec![3, h, w], data)?, path.display().to_string())
}

/// Decodes a single-channel map (e.g. a ground-truth boundary or a contour
/// export), returning an `[H, W]` tensor in `[0, 1]`.
pub fn load_gray(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let (w, h, data): (u32, u32, Vec<f64>) = match open_checked(path)? {
        image::DynamicImage::ImageLuma8(g) => (g.width(), g.height(), g.pixels().map(|p| p.0[0] as f64 / 255.0).collect()),
        image::DynamicImage::ImageLuma16(g) => (g.width(), g.height(), g.pixels().map(|p| p.0[0] as f64 / 65535.0).collect()),
        other => {
            let g = other.to_luma32f();
            (g.width(), g.height(), g.pixels().map(|p| (p.0[0] as f64).clamp(0.0, 1.0)).collect())
        }
    };
    Tensor::new(vec![h as usize, w as usize], data)
}

/// Bilinearly rescales every channel of a `[C, H, W]` tensor.
pub fn resize_channels(t: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let (c, h, w) = t.dims3()?;
    let mut data = Vec::with_capacity(c * new_h * new_w);
    for ch in 0..c {
        data.extend(resize_bilinear(t.channel(ch), h, w, new_h, new_w));
    }
    Tensor::new(vec![c, new_h, new_w], data)
}

/// Crops a `size = (rows, cols)` window at a uniformly drawn origin.
///
/// Images smaller than the crop in either dimension are first upscaled
/// bilinearly (aspect preserved) until both dimensions fit.
pub fn random_crop<R: Rng + ?Sized>(
    img: &ImageSample,
    size: (usize, usize),
    rng: &mut R,
) -> Result<ImageSample> {
    let (ch, cw) = size;
    if ch == 0 || cw == 0 {
        return Err(Error::InvalidArgument("crop size must be positive".into()));
    }
    let (h, w) = (img.height(), img.width());
    let pixels = if h < ch || w < cw {
        let s = (ch as f64 / h as f64).max(cw as f64 / w as f64);
        let nh = ((h as f64 * s).ceil() as usize).max(ch);
        let nw = ((w as f64 * s).ceil() as usize).max(cw);
        resize_channels(&img.pixels, nh, nw)?
    } else {
        img.pixels.clone()
    };
    let (_, h, w) = pixels.dims3()?;
    let r0 = rng.random_range(0..=h - ch);
    let c0 = rng.random_range(0..=w - cw);
    let mut data = Vec::with_capacity(3 * ch * cw);
    for c in 0..3 {
        let plane = pixels.channel(c);
        for r in r0..r0 + ch {
            data.extend_from_slice(&plane[r * w + c0..r * w + c0 + cw]);
        }
    }
    Ok(ImageSample {
        pixels: Tensor::new(vec![3, ch, cw], data)?,
        source: img.source.clone(),
        origin: (r0, c0),
    })
}

/// Writes an `[H, W]` map with values in `[0, 1]` as a 16-bit grayscale PNG.
pub fn save_png16(map: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = match map.shape() {
        [h, w] => (*h, *w),
        s => return Err(Error::Shape(format!("expected [H, W] map, got {s:?}"))),
    };
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = map.data()[y as usize * w + x as usize].clamp(0.0, 1.0);
        Luma([(v * 65535.0).round() as u16])
    });
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes a `[3, H, W]` tensor with values in `[0, 1]` as an 8-bit RGB PNG.
pub fn save_rgb_png(pixels: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = pixels.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| {
            let v = pixels.channel(ch)[y as usize * w + x as usize].clamp(0.0, 1.0);
            (v * 255.0).round() as u8
        };
        Rgb([at(0), at(1), at(2)])
    });
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Writes a binary `[H, W]` map (nonzero = on) as an 8-bit PNG.
pub fn save_binary_png(map: &[bool], h: usize, w: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if map[y as usize * w + x as usize] { 255 } else { 0 }])
    });
    buf.save_with_format(path, ImageFormat::Png)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
