//! Dense row-major tensors and the `PSTF` on-disk format.
//!
//! A `PSTF` file is laid out as
//!
//! ```text
//! b"PSTF" | dtype: u8 | ndim: u8 | dims: ndim x u32 (LE) | data (LE)
//! ```
//!
//! with dtype code 0 for `f32` and 1 for `f64`. Values are always held as
//! `f64` in memory; an `F32` tensor only ever holds `f32`-representable values
//! so a write/read round trip is bit-exact for both dtypes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PSTF";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    dtype: DType,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            dtype: DType::F64,
        })
    }

    pub fn from_f32(shape: Vec<usize>, data: &[f32]) -> Result<Self> {
        let mut t = Tensor::new(shape, data.iter().map(|&v| v as f64).collect())?;
        t.dtype = DType::F32;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            dtype: DType::F64,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
            dtype: DType::F64,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            dtype: DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Converts to the requested dtype, rounding through `f32` if needed.
    pub fn to_dtype(&self, dtype: DType) -> Tensor {
        let data = match dtype {
            DType::F64 => self.data.clone(),
            DType::F32 => self.data.iter().map(|&v| v as f32 as f64).collect(),
        };
        Tensor {
            shape: self.shape.clone(),
            data,
            dtype,
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Dimensions of a `[C, H, W]` tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Shape(format!(
                "expected a 3-d tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.shape == other.shape
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "cannot add {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            dtype: DType::F64,
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { index }),
            None => Ok(()),
        }
    }

    /// Channel `c` of a `[C, H, W]` tensor.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let plane = self.shape[1] * self.shape[2];
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.shape.len() > u8::MAX as usize {
            return Err(Error::Shape(format!("too many dimensions: {}", self.shape.len())));
        }
        let mut out = Vec::with_capacity(6 + 4 * self.shape.len() + self.dtype.width() * self.len());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype.code());
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Shape(format!("dimension {d} does not fit in u32")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match self.dtype {
            DType::F32 => self
                .data
                .iter()
                .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => self
                .data
                .iter()
                .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 {
            return Err(Error::Format("truncated header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Format("bad magic, not a PSTF file".into()));
        }
        let dtype = DType::from_code(bytes[4])?;
        let ndim = bytes[5] as usize;
        let header = 6 + 4 * ndim;
        if bytes.len() < header {
            return Err(Error::Format("truncated dimension list".into()));
        }
        let shape: Vec<usize> = bytes[6..header]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        let payload = &bytes[header..];
        let needed = count
            .checked_mul(dtype.width())
            .ok_or_else(|| Error::Format("payload size overflows".into()))?;
        if payload.len() < needed {
            return Err(Error::Format(format!(
                "truncated payload: expected {needed} bytes, found {}",
                payload.len()
            )));
        }
        if payload.len() > needed {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                payload.len() - needed
            )));
        }
        let data: Vec<f64> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        let t = Tensor { shape, data, dtype };
        t.check_finite()?;
        Ok(t)
    }
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = t.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes)
}

/// Bilinear resampling of one `h x w` plane with half-pixel centers.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, new_h: usize, new_w: usize) -> Vec<f64> {
    assert_eq!(src.len(), h * w);
    if h == new_h && w == new_w {
        return src.to_vec();
    }
    let axis = |n_src: usize, n_dst: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_src as f64 / n_dst as f64;
        (0..n_dst)
            .map(|i| {
                let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_src - 1) as f64);
                let lo = x.floor() as usize;
                let hi = (lo + 1).min(n_src - 1);
                (lo, hi, x - lo as f64)
            })
            .collect()
    };
    let rows = axis(h, new_h);
    let cols = axis(w, new_w);
    let mut out = Vec::with_capacity(new_h * new_w);
    for &(r0, r1, fr) in &rows {
        for &(c0, c1, fc) in &cols {
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bottom = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}
