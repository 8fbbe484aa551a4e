//! The switched pairwise Gaussian random field over feature maps.
//!
//! Every undirected edge `(i, j)` carries a binary switch `w`. With the switch
//! on, the edge contributes the Gaussian factor
//! `exp(-1/2 (f_i - f_j)^T C (f_i - f_j))` with diagonal precision `C`, scaled
//! so that an isolated pair keeps prior probability `p` for `w = 1`. Summing
//! the switch out yields the robust factor `p * psi + (1 - p)` used by the
//! losses, and the switch posterior is the connectivity measure.
//!
//! Parameters are shared per relative offset and stored as `log c` and
//! `logit p` so that both stay in range under unconstrained updates.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

/// Relative displacement `(dy, dx)` between two neighboring positions.
pub type Offset = (isize, isize);

/// Canonical neighbor offsets; each undirected edge direction appears once.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborhoodSpec {
    offsets: Vec<Offset>,
}

const RING_4: [Offset; 2] = [(0, 1), (1, 0)];
const RING_8: [Offset; 2] = [(1, 1), (1, -1)];
const RING_12: [Offset; 2] = [(0, 2), (2, 0)];
const RING_20: [Offset; 4] = [(1, 2), (2, 1), (1, -2), (2, -1)];

impl NeighborhoodSpec {
    /// The standard neighborhoods with 4, 8, 12 or 20 neighbors.
    pub fn standard(neighbors: usize) -> Result<Self> {
        let mut offsets = RING_4.to_vec();
        match neighbors {
            4 => {}
            8 => offsets.extend(RING_8),
            12 => offsets.extend(RING_8.iter().chain(&RING_12)),
            20 => offsets.extend(RING_8.iter().chain(&RING_12).chain(&RING_20)),
            n => {
                return Err(Error::InvalidArgument(format!(
                    "neighborhood size must be 4, 8, 12 or 20, got {n}"
                )))
            }
        }
        Ok(NeighborhoodSpec { offsets })
    }

    /// A custom offset list. Offsets must be canonical (`dy > 0`, or `dy == 0`
    /// and `dx > 0`) and distinct.
    pub fn from_offsets(offsets: Vec<Offset>) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::InvalidArgument("neighborhood has no offsets".into()));
        }
        for (i, &(dy, dx)) in offsets.iter().enumerate() {
            if !(dy > 0 || (dy == 0 && dx > 0)) {
                return Err(Error::InvalidArgument(format!(
                    "offset ({dy}, {dx}) is not canonical"
                )));
            }
            if offsets[..i].contains(&(dy, dx)) {
                return Err(Error::InvalidArgument(format!("duplicate offset ({dy}, {dx})")));
            }
        }
        Ok(NeighborhoodSpec { offsets })
    }

    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Number of neighbors of an interior position.
    pub fn neighbor_count(&self) -> usize {
        2 * self.offsets.len()
    }

    /// Largest absolute row and column displacement.
    pub fn margin(&self) -> (usize, usize) {
        self.offsets.iter().fold((0, 0), |(my, mx), &(dy, dx)| {
            (my.max(dy.unsigned_abs()), mx.max(dx.unsigned_abs()))
        })
    }
}

/// Trainable per-offset parameters: `log_c` is `[offsets, k]`, `logit_p` is `[offsets]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingParams {
    pub log_c: Tensor,
    pub logit_p: Tensor,
}

impl CouplingParams {
    /// `p = 0.5` and `c = 1` for every offset and channel.
    pub fn init(offsets: usize, channels: usize) -> Self {
        CouplingParams {
            log_c: Tensor::zeros(&[offsets, channels]),
            logit_p: Tensor::zeros(&[offsets]),
        }
    }

    pub fn from_values(c: &[Vec<f64>], p: &[f64]) -> Result<Self> {
        if c.len() != p.len() || c.is_empty() {
            return Err(Error::Shape("one precision vector and one prior per offset".into()));
        }
        let k = c[0].len();
        if c.iter().any(|v| v.len() != k) {
            return Err(Error::Shape("precision vectors differ in length".into()));
        }
        if c.iter().flatten().any(|&v| v <= 0.0) || p.iter().any(|&v| v <= 0.0 || v >= 1.0) {
            return Err(Error::InvalidArgument("need c > 0 and 0 < p < 1".into()));
        }
        let log_c = c.iter().flatten().map(|v| v.ln()).collect();
        let logit_p = p.iter().map(|v| (v / (1.0 - v)).ln()).collect();
        Ok(CouplingParams {
            log_c: Tensor::new(vec![c.len(), k], log_c)?,
            logit_p: Tensor::new(vec![p.len()], logit_p)?,
        })
    }

    pub fn offsets(&self) -> usize {
        self.logit_p.len()
    }

    pub fn channels(&self) -> usize {
        self.log_c.shape()[1]
    }

    pub fn log_c(&self, offset: usize) -> &[f64] {
        let k = self.channels();
        &self.log_c.data()[offset * k..(offset + 1) * k]
    }

    pub fn c(&self, offset: usize) -> Vec<f64> {
        self.log_c(offset).iter().map(|v| v.exp()).collect()
    }

    pub fn logit_p(&self, offset: usize) -> f64 {
        self.logit_p.data()[offset]
    }

    pub fn p(&self, offset: usize) -> f64 {
        sigmoid(self.logit_p(offset))
    }

    /// Zero-valued parameters of the same shape, used as a gradient buffer.
    pub fn zeros_like(&self) -> Self {
        CouplingParams {
            log_c: Tensor::zeros(self.log_c.shape()),
            logit_p: Tensor::zeros(self.logit_p.shape()),
        }
    }

    pub fn add_assign(&mut self, other: &CouplingParams) -> Result<()> {
        self.log_c.add_assign(&other.log_c)?;
        self.logit_p.add_assign(&other.logit_p)
    }

    pub fn scale(&mut self, factor: f64) {
        self.log_c.scale(factor);
        self.logit_p.scale(factor);
    }

    fn check(&self, spec: &NeighborhoodSpec, channels: usize) -> Result<()> {
        if self.log_c.ndim() != 2 || self.logit_p.ndim() != 1 || self.log_c.shape()[0] != self.offsets() {
            return Err(Error::Shape("malformed coupling parameters".into()));
        }
        if self.offsets() != spec.len() {
            return Err(Error::Shape(format!(
                "parameters cover {} offsets, neighborhood has {}",
                self.offsets(),
                spec.len()
            )));
        }
        if self.channels() != channels {
            return Err(Error::Shape(format!(
                "parameters expect {} channels, feature map has {channels}",
                self.channels()
            )));
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_len(fi: &[f64], fj: &[f64], c: &[f64]) -> Result<()> {
    if fi.len() != fj.len() || fi.len() != c.len() {
        return Err(Error::Shape(format!(
            "feature lengths {} and {} with {} precisions",
            fi.len(),
            fj.len(),
            c.len()
        )));
    }
    Ok(())
}

/// Log of the Gaussian pair factor: `-1/2 sum_l c_l (f_il - f_jl)^2`.
pub fn log_pair_energy(fi: &[f64], fj: &[f64], c: &[f64]) -> Result<f64> {
    check_len(fi, fj, c)?;
    Ok(energy(fi, fj, c))
}

#[inline]
fn energy(fi: &[f64], fj: &[f64], c: &[f64]) -> f64 {
    let mut acc = 0.0;
    for l in 0..c.len() {
        let d = fi[l] - fj[l];
        acc += c[l] * d * d;
    }
    -0.5 * acc
}

/// `log Z(w=0) / Z(w=1) = 1/2 sum_l log(1 + 2 c_l)` for diagonal precision `c`.
pub fn log_znorm_ratio(c: &[f64]) -> Result<f64> {
    if let Some(bad) = c.iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "precision entries must be positive, got {bad}"
        )));
    }
    Ok(znorm(c))
}

#[inline]
fn znorm(c: &[f64]) -> f64 {
    0.5 * c.iter().map(|v| (2.0 * v).ln_1p()).sum::<f64>()
}

/// Log of the switch-marginalized factor `p * exp(ratio + energy) + (1 - p)`.
pub fn log_robust_factor(fi: &[f64], fj: &[f64], c: &[f64], logit_p: f64) -> Result<f64> {
    check_len(fi, fj, c)?;
    let r = log_znorm_ratio(c)?;
    let e = energy(fi, fj, c);
    Ok(log_add_exp(-softplus(-logit_p) + r + e, -softplus(logit_p)))
}

/// `log p(w=1 | f) / p(w=0 | f)` for one edge.
pub fn posterior_logodds(fi: &[f64], fj: &[f64], c: &[f64], logit_p: f64) -> Result<f64> {
    check_len(fi, fj, c)?;
    Ok(logit_p + log_znorm_ratio(c)? + energy(fi, fj, c))
}

/// Value and gradient of [`log_robust_factor`] in the trainable coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct RobustFactorGrad {
    pub value: f64,
    pub d_logit_p: f64,
    pub d_log_c: Vec<f64>,
    /// Gradient with respect to `f_i`; the gradient for `f_j` is its negation.
    pub d_fi: Vec<f64>,
}

pub fn log_robust_factor_grad(
    fi: &[f64],
    fj: &[f64],
    log_c: &[f64],
    logit_p: f64,
) -> Result<RobustFactorGrad> {
    let c: Vec<f64> = log_c.iter().map(|v| v.exp()).collect();
    check_len(fi, fj, &c)?;
    let cache = OffsetCache::new(&c, logit_p);
    let (value, s) = cache.eval(fi, fj);
    let mut out = RobustFactorGrad {
        value,
        d_logit_p: 0.0,
        d_log_c: vec![0.0; c.len()],
        d_fi: vec![0.0; c.len()],
    };
    let mut d_fj = vec![0.0; c.len()];
    cache.backprop(fi, fj, 1.0, s, &mut out.d_logit_p, &mut out.d_log_c, &mut out.d_fi, &mut d_fj);
    Ok(out)
}

/// Per-offset quantities reused across many factor evaluations.
#[derive(Clone, Debug)]
pub(crate) struct OffsetCache {
    pub c: Vec<f64>,
    pub logit_p: f64,
    pub p: f64,
    ratio: f64,
    log_p: f64,
    log_1mp: f64,
    /// `c_l / (1 + 2 c_l)`, the derivative of the ratio in `log c_l`.
    d_ratio: Vec<f64>,
}

impl OffsetCache {
    pub fn new(c: &[f64], logit_p: f64) -> Self {
        OffsetCache {
            c: c.to_vec(),
            logit_p,
            p: sigmoid(logit_p),
            ratio: znorm(c),
            log_p: -softplus(-logit_p),
            log_1mp: -softplus(logit_p),
            d_ratio: c.iter().map(|v| v / (1.0 + 2.0 * v)).collect(),
        }
    }

    pub fn from_params(params: &CouplingParams, offset: usize) -> Self {
        Self::new(&params.c(offset), params.logit_p(offset))
    }

    /// Returns `(log M, s)` where `s = p(w = 1 | f_i, f_j)`.
    #[inline]
    pub fn eval(&self, a: &[f64], b: &[f64]) -> (f64, f64) {
        let e = energy(a, b, &self.c);
        let on = self.log_p + self.ratio + e;
        let value = log_add_exp(on, self.log_1mp);
        let s = sigmoid(self.logit_p + self.ratio + e);
        (value, s)
    }

    /// Adds `u * d(log M)` to the parameter and feature gradient buffers.
    #[allow(clippy::too_many_arguments)]
    #[inline]
    pub fn backprop(
        &self,
        a: &[f64],
        b: &[f64],
        u: f64,
        s: f64,
        d_logit_p: &mut f64,
        d_log_c: &mut [f64],
        d_a: &mut [f64],
        d_b: &mut [f64],
    ) {
        let us = u * s;
        *d_logit_p += u * (s - self.p);
        for l in 0..self.c.len() {
            let d = a[l] - b[l];
            let cl = self.c[l];
            d_log_c[l] += us * (self.d_ratio[l] - 0.5 * cl * d * d);
            let g = us * cl * d;
            d_a[l] -= g;
            d_b[l] += g;
        }
    }
}

/// Per-offset grids of switch posterior log-odds.
///
/// Entry `(y, x)` of offset `o = (dy, dx)` belongs to the edge between
/// `(y, x)` and `(y + dy, x + dx)`; it is valid only when both ends lie inside
/// the map.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityMap {
    pub offsets: Vec<Offset>,
    pub height: usize,
    pub width: usize,
    pub logodds: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ConnectivityManifest {
    offsets: Vec<Offset>,
    height: usize,
    width: usize,
    files: Vec<String>,
}

impl ConnectivityMap {
    #[inline]
    pub fn is_valid(&self, offset: usize, y: usize, x: usize) -> bool {
        let (dy, dx) = self.offsets[offset];
        let ty = y as isize + dy;
        let tx = x as isize + dx;
        ty >= 0 && tx >= 0 && (ty as usize) < self.height && (tx as usize) < self.width
    }

    pub fn valid_count(&self, offset: usize) -> usize {
        let (dy, dx) = self.offsets[offset];
        self.height.saturating_sub(dy.unsigned_abs()) * self.width.saturating_sub(dx.unsigned_abs())
    }

    /// Every valid entry as `(offset, y, x, logodds)`.
    pub fn valid_entries(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        (0..self.offsets.len()).flat_map(move |o| {
            (0..self.height).flat_map(move |y| {
                (0..self.width)
                    .filter(move |&x| self.is_valid(o, y, x))
                    .map(move |x| (o, y, x, self.logodds[o][y * self.width + x]))
            })
        })
    }

    /// Writes one PSTF file per offset plus `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::with_capacity(self.offsets.len());
        for (o, grid) in self.logodds.iter().enumerate() {
            let name = format!("offset{o:02}.pstf");
            let t = Tensor::new(vec![self.height, self.width], grid.clone())?;
            write_tensor(&t, dir.join(&name))?;
            files.push(name);
        }
        let manifest = ConnectivityManifest {
            offsets: self.offsets.clone(),
            height: self.height,
            width: self.width,
            files,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let m: ConnectivityManifest = serde_json::from_slice(&bytes)?;
        if m.files.len() != m.offsets.len() {
            return Err(Error::Format("manifest lists a file count unlike its offsets".into()));
        }
        let mut logodds = Vec::with_capacity(m.files.len());
        for f in &m.files {
            let t = read_tensor(dir.join(f))?;
            if t.shape() != [m.height, m.width] {
                return Err(Error::Shape(format!("{f} has shape {:?}", t.shape())));
            }
            logodds.push(t.into_data());
        }
        Ok(ConnectivityMap {
            offsets: m.offsets,
            height: m.height,
            width: m.width,
            logodds,
        })
    }
}

/// Evaluates the switch posterior on every in-bounds edge of a `[k, H, W]` map.
pub fn connectivity_map(
    features: &Tensor,
    spec: &NeighborhoodSpec,
    params: &CouplingParams,
) -> Result<ConnectivityMap> {
    let (k, h, w) = features.dims3()?;
    params.check(spec, k)?;
    let plane = h * w;
    let data = features.data();
    let mut logodds = Vec::with_capacity(spec.len());
    let mut a = vec![0.0; k];
    let mut b = vec![0.0; k];
    for (o, &(dy, dx)) in spec.offsets().iter().enumerate() {
        let c = params.c(o);
        let base = params.logit_p(o) + znorm(&c);
        let mut grid = vec![0.0; plane];
        for y in 0..h {
            let ty = y as isize + dy;
            if ty < 0 || ty as usize >= h {
                continue;
            }
            for x in 0..w {
                let tx = x as isize + dx;
                if tx < 0 || tx as usize >= w {
                    continue;
                }
                let j = ty as usize * w + tx as usize;
                for l in 0..k {
                    a[l] = data[l * plane + y * w + x];
                    b[l] = data[l * plane + j];
                }
                grid[y * w + x] = base + energy(&a, &b, &c);
            }
        }
        logodds.push(grid);
    }
    Ok(ConnectivityMap {
        offsets: spec.offsets().to_vec(),
        height: h,
        width: w,
        logodds,
    })
}
