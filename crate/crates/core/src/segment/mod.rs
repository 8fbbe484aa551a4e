//! Spectral globalization: from connectivity to contours.
//!
//! The posterior log-odds of every edge are shifted by their 30% quantile and
//! floored at 0.01 to give a connected, positively weighted pixel graph. The
//! smallest eigenvectors of its normalized Laplacian vary smoothly inside
//! coherent regions and change sharply between them, so oriented derivative
//! filters applied to them and summed with weights `1/sqrt(lambda)` yield a
//! contour map.

mod filters;
pub mod lanczos;
pub mod linalg;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use filters::{derivative_of_gaussian, gaussian_kernel, oriented_edge_energy, reflect_index};
pub use lanczos::{smallest_eigenpairs, EigenPair, LanczosConfig, LinearOperator};

use crate::error::{Error, Result};
use crate::image_io::save_png16;
use crate::models::FeatureMap;
use crate::mrf::{connectivity_map, ConnectivityMap, CouplingParams, NeighborhoodSpec};
use crate::tensor::{resize_bilinear, write_tensor, Tensor};

pub const AFFINITY_QUANTILE: f64 = 0.3;
pub const AFFINITY_FLOOR: f64 = 0.01;
/// Eigenpairs computed per image, the trivial one included.
pub const EIGENVECTOR_COUNT: usize = 17;
/// Eigenvalues at or below this count as zero.
pub const ZERO_EIGENVALUE: f64 = 1e-10;

/// Quantile with linear interpolation between order statistics
/// (position `q (n - 1)` in the sorted values).
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("quantile of an empty set".into()));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("quantile level {q} outside [0, 1]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]))
}

/// `max(v - quantile_q(values), floor)` for every value.
pub fn shifted_weights(values: &[f64], q: f64, floor: f64) -> Result<Vec<f64>> {
    let shift = quantile(values, q)?;
    Ok(values.iter().map(|v| (v - shift).max(floor)).collect())
}

/// Undirected weighted graph over `nodes` vertices; each edge listed once.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseAffinity {
    nodes: usize,
    edges: Vec<(usize, usize, f64)>,
}

impl SparseAffinity {
    pub fn new(nodes: usize, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        for &(i, j, w) in &edges {
            if i >= nodes || j >= nodes {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) outside {nodes} nodes")));
            }
            if i == j {
                return Err(Error::InvalidArgument(format!("self-loop at node {i}")));
            }
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) has weight {w}")));
            }
        }
        Ok(SparseAffinity { nodes, edges })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize, f64)] {
        &self.edges
    }

    pub fn degrees(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.nodes];
        for &(i, j, w) in &self.edges {
            d[i] += w;
            d[j] += w;
        }
        d
    }
}

/// Pixel graph of one connectivity map, with quantile-shifted, floored weights.
pub fn affinity_from_connectivity(cm: &ConnectivityMap) -> Result<SparseAffinity> {
    affinity_with(cm, AFFINITY_QUANTILE, AFFINITY_FLOOR)
}

pub fn affinity_with(cm: &ConnectivityMap, q: f64, floor: f64) -> Result<SparseAffinity> {
    let entries: Vec<(usize, usize, usize, f64)> = cm.valid_entries().collect();
    if entries.is_empty() {
        return Err(Error::Degenerate("connectivity map has no valid edge".into()));
    }
    let values: Vec<f64> = entries.iter().map(|e| e.3).collect();
    let weights = shifted_weights(&values, q, floor)?;
    let w = cm.width;
    let edges = entries
        .iter()
        .zip(weights)
        .map(|(&(o, y, x, _), weight)| {
            let (dy, dx) = cm.offsets[o];
            let ty = (y as isize + dy) as usize;
            let tx = (x as isize + dx) as usize;
            (y * w + x, ty * w + tx, weight)
        })
        .collect();
    SparseAffinity::new(cm.height * cm.width, edges)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LaplacianKind {
    /// `I - D^{-1/2} W D^{-1/2}`
    #[default]
    Normalized,
    /// `D - W`
    Unnormalized,
}

/// Sparse graph Laplacian in compressed-row form.
#[derive(Clone, Debug)]
pub struct GraphLaplacian {
    kind: LaplacianKind,
    row_start: Vec<usize>,
    cols: Vec<usize>,
    /// Off-diagonal magnitudes: `w_ij / sqrt(d_i d_j)` or `w_ij`.
    vals: Vec<f64>,
    degree: Vec<f64>,
}

impl GraphLaplacian {
    pub fn new(aff: &SparseAffinity, kind: LaplacianKind) -> Result<Self> {
        let n = aff.nodes();
        let degree = aff.degrees();
        if let Some(i) = degree.iter().position(|&d| d <= 0.0) {
            return Err(Error::Degenerate(format!("node {i} has no incident edge")));
        }
        let mut counts = vec![0usize; n + 1];
        for &(i, j, _) in aff.edges() {
            counts[i + 1] += 1;
            counts[j + 1] += 1;
        }
        for i in 0..n {
            counts[i + 1] += counts[i];
        }
        let row_start = counts.clone();
        let mut fill = counts;
        let mut cols = vec![0; row_start[n]];
        let mut vals = vec![0.0; row_start[n]];
        for &(i, j, w) in aff.edges() {
            let v = match kind {
                LaplacianKind::Normalized => w / (degree[i] * degree[j]).sqrt(),
                LaplacianKind::Unnormalized => w,
            };
            cols[fill[i]] = j;
            vals[fill[i]] = v;
            fill[i] += 1;
            cols[fill[j]] = i;
            vals[fill[j]] = v;
            fill[j] += 1;
        }
        Ok(GraphLaplacian {
            kind,
            row_start,
            cols,
            vals,
            degree,
        })
    }

    pub fn kind(&self) -> LaplacianKind {
        self.kind
    }

    pub fn degrees(&self) -> &[f64] {
        &self.degree
    }

    /// Row-major dense copy, for small graphs and tests.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.degree.len();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            out[i * n + i] = match self.kind {
                LaplacianKind::Normalized => 1.0,
                LaplacianKind::Unnormalized => self.degree[i],
            };
            for k in self.row_start[i]..self.row_start[i + 1] {
                out[i * n + self.cols[k]] -= self.vals[k];
            }
        }
        out
    }
}

impl LinearOperator for GraphLaplacian {
    fn dim(&self) -> usize {
        self.degree.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        const ROWS: usize = 4096;
        y.par_chunks_mut(ROWS).enumerate().for_each(|(chunk, ys)| {
            for (r, out) in ys.iter_mut().enumerate() {
                let i = chunk * ROWS + r;
                let mut acc = match self.kind {
                    LaplacianKind::Normalized => x[i],
                    LaplacianKind::Unnormalized => self.degree[i] * x[i],
                };
                for k in self.row_start[i]..self.row_start[i + 1] {
                    acc -= self.vals[k] * x[self.cols[k]];
                }
                *out = acc;
            }
        });
    }
}

/// A boundary-strength image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContourMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ContourMap {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.values.clone()).expect("consistent contour map")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        match t.shape() {
            [h, w] => Ok(ContourMap {
                height: *h,
                width: *w,
                values: t.data().to_vec(),
            }),
            s => Err(Error::Shape(format!("contour maps are 2-d, got {s:?}"))),
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        save_png16(&self.to_tensor(), path)
    }

    pub fn save_pstf(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(&self.to_tensor(), path)
    }
}

/// Map and output sizes for contour extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContourGeometry {
    pub map: (usize, usize),
    pub image: (usize, usize),
}

impl ContourGeometry {
    pub fn from_downsampling(map: (usize, usize), factor: usize) -> Self {
        ContourGeometry {
            map,
            image: (map.0 * factor, map.1 * factor),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    /// Eigenpairs per image including the trivial one.
    pub eigenvectors: usize,
    pub quantile: f64,
    pub floor: f64,
    pub laplacian: LaplacianKind,
    /// Width of the derivative-of-Gaussian filters in map pixels.
    pub sigma: f64,
    pub orientations: usize,
    pub lanczos: LanczosConfig,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            eigenvectors: EIGENVECTOR_COUNT,
            quantile: AFFINITY_QUANTILE,
            floor: AFFINITY_FLOOR,
            laplacian: LaplacianKind::Normalized,
            sigma: 1.0,
            orientations: 8,
            lanczos: LanczosConfig::default(),
        }
    }
}

/// Turns eigenpairs of a graph over a `map.0 x map.1` grid into a contour map.
///
/// The smallest pair is dropped as trivial; every other eigenvector is
/// multiplied entrywise by `rescale` when given (`D^{-1/2}` for the normalized
/// Laplacian), filtered, and weighted by `1/sqrt(lambda)`.
pub fn eigen_to_contours(
    pairs: &[EigenPair],
    geometry: ContourGeometry,
    rescale: Option<&[f64]>,
    sigma: f64,
    orientations: usize,
) -> Result<ContourMap> {
    let (mh, mw) = geometry.map;
    let (ih, iw) = geometry.image;
    if pairs.len() < 2 {
        return Err(Error::InvalidArgument("need at least two eigenpairs".into()));
    }
    if mh * mw == 0 || ih * iw == 0 {
        return Err(Error::Shape("empty contour geometry".into()));
    }
    if let Some(s) = rescale {
        if s.len() != mh * mw {
            return Err(Error::Shape("rescale vector does not match the map".into()));
        }
    }
    let mut sorted: Vec<&EigenPair> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value));
    let informative: Vec<&EigenPair> = sorted[1..].iter().copied().filter(|p| p.value > ZERO_EIGENVALUE).collect();
    if informative.is_empty() {
        return Err(Error::Degenerate("all eigenvalues are zero".into()));
    }
    let responses: Vec<Vec<f64>> = informative
        .par_iter()
        .map(|p| {
            if p.vector.len() != mh * mw {
                return Err(Error::Shape(format!(
                    "eigenvector of length {} for a {mh}x{mw} map",
                    p.vector.len()
                )));
            }
            let v: Vec<f64> = match rescale {
                Some(s) => p.vector.iter().zip(s).map(|(a, b)| a * b).collect(),
                None => p.vector.clone(),
            };
            let mut r = oriented_edge_energy(&v, mh, mw, sigma, orientations)?;
            let weight = 1.0 / p.value.sqrt();
            r.iter_mut().for_each(|x| *x *= weight);
            Ok(r)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; mh * mw];
    for r in &responses {
        total.iter_mut().zip(r).for_each(|(t, v)| *t += v);
    }
    let mut values = if (ih, iw) == (mh, mw) {
        total
    } else {
        resize_bilinear(&total, mh, mw, ih, iw)
    };
    let max = values.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v = (*v / max).clamp(0.0, 1.0));
    }
    Ok(ContourMap {
        height: ih,
        width: iw,
        values,
    })
}

/// Contours of a connectivity map at the requested output size.
pub fn contours_from_connectivity(
    cm: &ConnectivityMap,
    image: (usize, usize),
    cfg: &SegmentConfig,
) -> Result<ContourMap> {
    let aff = affinity_with(cm, cfg.quantile, cfg.floor)?;
    let lap = GraphLaplacian::new(&aff, cfg.laplacian)?;
    let n = aff.nodes();
    if n < 3 {
        return Err(Error::Degenerate(format!("a {n}-node graph has no informative eigenvector")));
    }
    let count = cfg.eigenvectors.min(n - 1).max(2);
    let pairs = smallest_eigenpairs(&lap, count, &cfg.lanczos)?;
    let rescale: Option<Vec<f64>> = match cfg.laplacian {
        LaplacianKind::Normalized => Some(lap.degrees().iter().map(|d| 1.0 / d.sqrt()).collect()),
        LaplacianKind::Unnormalized => None,
    };
    eigen_to_contours(
        &pairs,
        ContourGeometry {
            map: (cm.height, cm.width),
            image,
        },
        rescale.as_deref(),
        cfg.sigma,
        cfg.orientations,
    )
}

/// The full pipeline for one feature map, output at `map size x downsampling`.
pub fn contours(fm: &FeatureMap, spec: &NeighborhoodSpec, params: &CouplingParams, cfg: &SegmentConfig) -> Result<ContourMap> {
    let image = (fm.height() * fm.downsampling, fm.width() * fm.downsampling);
    contours_at(fm, spec, params, image, cfg)
}

/// The full pipeline with an explicit output size (the source image size).
pub fn contours_at(
    fm: &FeatureMap,
    spec: &NeighborhoodSpec,
    params: &CouplingParams,
    image: (usize, usize),
    cfg: &SegmentConfig,
) -> Result<ContourMap> {
    let cm = connectivity_map(&fm.values, spec, params)?;
    contours_from_connectivity(&cm, image, cfg)
}
