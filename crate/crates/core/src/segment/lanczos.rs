//! Smallest eigenpairs of a large sparse symmetric operator.
//!
//! Block Lanczos with thick restarts and full reorthogonalization: the basis
//! is grown by applying the operator to the newest block, every new vector is
//! orthogonalized twice against the whole basis, and when the basis is full
//! the smallest Ritz pairs are kept and the residuals of the unconverged ones
//! seed the next block. Blocks larger than one recover repeated eigenvalues
//! that a single Krylov sequence cannot see.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::linalg::{axpy, dot, jacobi_eigen, norm, scale, SymMatrix};
use crate::error::{Error, Result};

/// A symmetric linear map on `R^n`.
pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    /// `y = A x`
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    /// Unit-norm eigenvector; its largest-magnitude entry is positive.
    pub vector: Vec<f64>,
    /// `||A v - value v||` at return.
    pub residual: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LanczosConfig {
    /// Required residual norm per returned pair.
    pub tol: f64,
    pub max_restarts: usize,
    pub block_size: usize,
    /// Basis size before a restart; `None` picks `max(3 count, count + 6 block)`.
    pub basis_size: Option<usize>,
    /// Seed of the random starting block.
    pub seed: u64,
}

impl Default for LanczosConfig {
    fn default() -> Self {
        LanczosConfig {
            tol: 1e-8,
            max_restarts: 2000,
            block_size: 2,
            basis_size: None,
            seed: 0x5eed,
        }
    }
}

fn finish(mut value: f64, mut vector: Vec<f64>, residual: f64) -> EigenPair {
    let n = norm(&vector);
    scale(1.0 / n, &mut vector);
    let lead = vector
        .iter()
        .copied()
        .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
    if lead < 0.0 {
        scale(-1.0, &mut vector);
    }
    if value.abs() < f64::MIN_POSITIVE {
        value = 0.0;
    }
    EigenPair {
        value,
        vector,
        residual,
    }
}

fn residual_norm<A: LinearOperator + ?Sized>(op: &A, value: f64, vector: &[f64]) -> f64 {
    let mut av = vec![0.0; vector.len()];
    op.apply(vector, &mut av);
    axpy(-value, vector, &mut av);
    norm(&av) / norm(vector)
}

/// Dense path for operators no larger than the Lanczos basis.
fn dense_smallest<A: LinearOperator + ?Sized>(op: &A, count: usize) -> Vec<EigenPair> {
    let n = op.dim();
    let mut m = SymMatrix::zeros(n);
    let mut e = vec![0.0; n];
    let mut col = vec![0.0; n];
    for j in 0..n {
        e[j] = 1.0;
        op.apply(&e, &mut col);
        for i in 0..n {
            m.set(i, j, col[i]);
        }
        e[j] = 0.0;
    }
    let (values, vectors) = jacobi_eigen(&m);
    (0..count)
        .map(|c| {
            let v: Vec<f64> = (0..n).map(|r| vectors[r * n + c]).collect();
            let res = residual_norm(op, values[c], &v);
            finish(values[c], v, res)
        })
        .collect()
}

/// Orthogonalizes `w` against `basis` twice (classical Gram-Schmidt) and
/// normalizes it. Returns `false` when `w` lies numerically in the span.
fn orthonormalize(basis: &[Vec<f64>], w: &mut [f64]) -> bool {
    let before = norm(w);
    if before == 0.0 || !before.is_finite() {
        return false;
    }
    for _ in 0..2 {
        let coeffs: Vec<f64> = basis.par_iter().map(|b| dot(b, w)).collect();
        for (b, c) in basis.iter().zip(coeffs) {
            axpy(-c, b, w);
        }
    }
    let after = norm(w);
    if after <= 1e-10 * before {
        return false;
    }
    scale(1.0 / after, w);
    true
}

/// Linear combinations `out_i = sum_j basis_j y[j, i]` for the first `cols`
/// columns of a row-major `m x m` matrix `y`.
fn combine(basis: &[Vec<f64>], y: &[f64], m: usize, cols: usize) -> Vec<Vec<f64>> {
    let n = basis[0].len();
    (0..cols)
        .into_par_iter()
        .map(|i| {
            let mut out = vec![0.0; n];
            for (j, b) in basis.iter().enumerate() {
                let c = y[j * m + i];
                if c != 0.0 {
                    out.iter_mut().zip(b).for_each(|(o, v)| *o += c * v);
                }
            }
            out
        })
        .collect()
}

/// The `count` smallest eigenpairs of `op`, ascending by eigenvalue.
pub fn smallest_eigenpairs<A: LinearOperator + ?Sized>(
    op: &A,
    count: usize,
    cfg: &LanczosConfig,
) -> Result<Vec<EigenPair>> {
    let n = op.dim();
    if count == 0 || count >= n {
        return Err(Error::InvalidArgument(format!(
            "requested {count} eigenpairs of a {n}-dimensional operator"
        )));
    }
    if !(cfg.tol > 0.0) || cfg.block_size == 0 {
        return Err(Error::InvalidArgument("tolerance and block size must be positive".into()));
    }
    let p = cfg.block_size.min(count);
    let m = cfg
        .basis_size
        .unwrap_or((3 * count).max(count + 6 * p))
        .max(count + 2 * p);
    if m >= n {
        return Ok(dense_smallest(op, count));
    }
    let keep = (count + (m - count) / 2).min(m - p);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let random_vector = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    };

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut images: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut next: Vec<Vec<f64>> = (0..p).map(|_| random_vector(&mut rng)).collect();
    let mut best = f64::INFINITY;
    // projected operator; after a thick restart the kept block is diagonal,
    // so only columns from `known` onward need fresh inner products
    let mut h = SymMatrix::zeros(m);
    let mut known = 0;

    for _restart in 0..cfg.max_restarts {
        // expand the basis
        while basis.len() < m {
            let take = p.min(m - basis.len());
            let mut added = Vec::with_capacity(take);
            for mut w in next.drain(..).take(take) {
                let mut tries = 0;
                while !orthonormalize(&basis, &mut w) {
                    tries += 1;
                    if tries > 8 {
                        return Err(Error::Degenerate("cannot extend the Krylov basis".into()));
                    }
                    w = random_vector(&mut rng);
                }
                let mut aw = vec![0.0; n];
                op.apply(&w, &mut aw);
                basis.push(w);
                images.push(aw.clone());
                added.push(aw);
            }
            while added.len() < p {
                added.push(random_vector(&mut rng));
            }
            next = added;
        }

        // Rayleigh-Ritz on the full basis
        let pairs: Vec<(usize, usize)> = (known..m).flat_map(|j| (0..=j).map(move |i| (i, j))).collect();
        let entries: Vec<f64> = pairs.par_iter().map(|&(i, j)| dot(&basis[i], &images[j])).collect();
        for (&(i, j), &v) in pairs.iter().zip(&entries) {
            h.set(i, j, v);
            h.set(j, i, v);
        }
        let (theta, y) = jacobi_eigen(&h);
        let ritz = combine(&basis, &y, m, keep);
        let ritz_images = combine(&images, &y, m, keep);
        let residuals: Vec<Vec<f64>> = ritz
            .par_iter()
            .zip(&ritz_images)
            .zip(&theta[..keep])
            .map(|((x, ax), &t)| {
                let mut r = ax.clone();
                axpy(-t, x, &mut r);
                r
            })
            .collect();
        let res_norms: Vec<f64> = residuals.iter().map(|r| norm(r)).collect();
        let worst = res_norms[..count].iter().copied().fold(0.0, f64::max);
        best = best.min(worst);

        if worst <= cfg.tol {
            // confirm against fresh operator applications
            let out: Vec<EigenPair> = (0..count)
                .map(|i| {
                    let r = residual_norm(op, theta[i], &ritz[i]);
                    finish(theta[i], ritz[i].clone(), r)
                })
                .collect();
            if out.iter().all(|e| e.residual <= cfg.tol) {
                return Ok(out);
            }
            // stored images have drifted; refresh them and continue
            basis = ritz;
            images = basis
                .par_iter()
                .map(|x| {
                    let mut ax = vec![0.0; n];
                    op.apply(x, &mut ax);
                    ax
                })
                .collect();
            next = (0..p).map(|_| random_vector(&mut rng)).collect();
            known = 0;
            continue;
        }

        // thick restart: keep the smallest Ritz pairs, continue from the
        // residuals of the first unconverged ones
        let mut seeds: Vec<Vec<f64>> = Vec::with_capacity(p);
        for (i, r) in residuals.iter().enumerate() {
            if seeds.len() == p {
                break;
            }
            if res_norms[i] > cfg.tol {
                seeds.push(r.clone());
            }
        }
        while seeds.len() < p {
            seeds.push(random_vector(&mut rng));
        }
        basis = ritz;
        images = ritz_images;
        next = seeds;
        h = SymMatrix::zeros(m);
        for (i, &t) in theta[..keep].iter().enumerate() {
            h.set(i, i, t);
        }
        known = keep;
    }
    Err(Error::NoConvergence {
        iterations: cfg.max_restarts,
        best_residual: best,
    })
}
