//! Independent numerical checks of the random-field algebra: normalization
//! constants by quadrature, posteriors by explicit branch densities and by
//! enumeration of switch configurations.

use nalgebra::DMatrix;
use predseg::mrf::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Trapezoid rule on `[-l, l]^2` with `n` intervals per axis.
fn quad2(f: impl Fn(f64, f64) -> f64, l: f64, n: usize) -> f64 {
    let h = 2.0 * l / n as f64;
    let mut s = 0.0;
    for i in 0..=n {
        let x = -l + i as f64 * h;
        let wx = if i == 0 || i == n { 0.5 } else { 1.0 };
        for j in 0..=n {
            let y = -l + j as f64 * h;
            let wy = if j == 0 || j == n { 0.5 } else { 1.0 };
            s += wx * wy * f(x, y);
        }
    }
    s * h * h
}

/// `log Z(w=0) - log Z(w=1)` with each per-dimension two-variable integral
/// evaluated numerically.
fn znorm_by_quadrature(c: &[f64]) -> f64 {
    c.iter()
        .map(|&cl| {
            let z1 = quad2(|x, y| (-0.5 * x * x - 0.5 * y * y - 0.5 * cl * (x - y) * (x - y)).exp(), 10.0, 1000);
            let z0 = quad2(|x, y| (-0.5 * x * x - 0.5 * y * y).exp(), 10.0, 1000);
            z0.ln() - z1.ln()
        })
        .sum()
}

#[test]
fn znorm_ratio_matches_quadrature() {
    for &c in &[0.01, 0.5, 1.0, 4.0, 20.0] {
        for &k in &[1usize, 3] {
            let cs: Vec<f64> = (0..k).map(|l| c * (1.0 + 0.5 * l as f64)).collect();
            let exact = log_znorm_ratio(&cs).unwrap();
            let numeric = znorm_by_quadrature(&cs);
            assert!((exact - numeric).abs() < 1e-6, "c={c} k={k}: {exact} vs {numeric}");
        }
    }
}

#[test]
fn znorm_ratio_examples() {
    assert!((log_znorm_ratio(&[4.0]).unwrap() - 3f64.ln()).abs() < 1e-15);
    assert!((log_znorm_ratio(&[1.0, 3.0]).unwrap() - 0.5 * (3f64.ln() + 7f64.ln())).abs() < 1e-15);
    assert!(log_znorm_ratio(&[1e-300]).unwrap() < 1e-299);
}

/// Log normalizer of the unnormalized Gaussian over `2k` variables with the
/// coupled precision `[[I + C, -C], [-C, I + C]]`, via a determinant.
fn log_z_coupled(c: &[f64]) -> f64 {
    let k = c.len();
    let mut m = DMatrix::<f64>::identity(2 * k, 2 * k);
    for l in 0..k {
        m[(l, l)] += c[l];
        m[(k + l, k + l)] += c[l];
        m[(l, k + l)] -= c[l];
        m[(k + l, l)] -= c[l];
    }
    k as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * m.determinant().ln()
}

fn log_z_free(k: usize) -> f64 {
    k as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Log of the unnormalized joint weight of one edge's branch (standard
/// normal prior on the features omitted, it is common to both branches).
fn branch(w: bool, fi: &[f64], fj: &[f64], c: &[f64], p: f64) -> f64 {
    if w {
        let q: f64 = c.iter().zip(fi.iter().zip(fj)).map(|(cl, (a, b))| cl * (a - b) * (a - b)).sum();
        p.ln() - log_z_coupled(c) - 0.5 * q
    } else {
        (1.0 - p).ln() - log_z_free(c.len())
    }
}

#[test]
fn posterior_matches_branch_densities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let k = rng.random_range(1..5);
        let fi: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let fj: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let c: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..5.0)).collect();
        let p: f64 = rng.random_range(0.02..0.98);
        let logit = (p / (1.0 - p)).ln();
        let oracle = branch(true, &fi, &fj, &c, p) - branch(false, &fi, &fj, &c, p);
        let got = posterior_logodds(&fi, &fj, &c, logit).unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
        // the robust factor is the switch-marginalized branch sum relative to w=0's normalizer
        let m = (branch(true, &fi, &fj, &c, p).exp() + branch(false, &fi, &fj, &c, p).exp()).ln() + log_z_free(k);
        assert!((log_robust_factor(&fi, &fj, &c, logit).unwrap() - m).abs() < 1e-10);
    }
}

#[test]
fn posterior_examples() {
    let half_ln3 = 0.5 * 3f64.ln();
    assert!((posterior_logodds(&[0.3], &[0.3], &[1.0], 0.0).unwrap() - half_ln3).abs() < 1e-15);
    assert!((posterior_logodds(&[0.0], &[2.0], &[1.0], 0.0).unwrap() - (half_ln3 - 2.0)).abs() < 1e-15);
    assert!(posterior_logodds(&[0.0], &[2.0], &[1e-12], 0.0).unwrap().abs() < 1e-11);
    let expect = (0.5 * 3f64.sqrt() + 0.5).ln();
    assert!((log_robust_factor(&[1.0], &[1.0], &[1.0], 0.0).unwrap() - expect).abs() < 1e-15);
}

#[test]
fn triangle_enumeration_reproduces_edge_posteriors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let edges = [(0usize, 1usize), (1, 2), (0, 2)];
    for _ in 0..50 {
        let k = rng.random_range(1..4);
        let f: Vec<Vec<f64>> = (0..3).map(|_| (0..k).map(|_| rng.random_range(-1.5..1.5)).collect()).collect();
        let c: Vec<Vec<f64>> = (0..3).map(|_| (0..k).map(|_| rng.random_range(0.1..3.0)).collect()).collect();
        let p: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..0.95)).collect();
        // joint weight of each of the 8 switch configurations
        let weights: Vec<f64> = (0..8u32)
            .map(|cfg| {
                edges
                    .iter()
                    .enumerate()
                    .map(|(e, &(a, b))| branch(cfg >> e & 1 == 1, &f[a], &f[b], &c[e], p[e]))
                    .sum::<f64>()
                    .exp()
            })
            .collect();
        for (e, &(a, b)) in edges.iter().enumerate() {
            let on: f64 = (0..8u32).filter(|cfg| cfg >> e & 1 == 1).map(|cfg| weights[cfg as usize]).sum();
            let off: f64 = (0..8u32).filter(|cfg| cfg >> e & 1 == 0).map(|cfg| weights[cfg as usize]).sum();
            let logit = (p[e] / (1.0 - p[e])).ln();
            let got = posterior_logodds(&f[a], &f[b], &c[e], logit).unwrap();
            assert!((got - (on / off).ln()).abs() < 1e-10, "edge {e}: {got} vs {}", (on / off).ln());
        }
    }
}

/// Standard normal density of one coordinate.
fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

#[test]
fn isolated_pair_keeps_its_prior_one_dimension() {
    for &p in &[0.1f64, 0.5, 0.9] {
        for &c in &[0.5, 2.0] {
            let logit = (p / (1.0 - p)).ln();
            // the marginal density of (f_i, f_j) is N(f) * M(f); its switch posterior is the sigmoid
            let mass = quad2(
                |x, y| phi(x) * phi(y) * log_robust_factor(&[x], &[y], &[c], logit).unwrap().exp(),
                9.0,
                600,
            );
            let on = quad2(
                |x, y| {
                    let m = log_robust_factor(&[x], &[y], &[c], logit).unwrap().exp();
                    phi(x) * phi(y) * m * sigmoid(posterior_logodds(&[x], &[y], &[c], logit).unwrap())
                },
                9.0,
                600,
            );
            assert!((mass - 1.0).abs() < 1e-4, "mass {mass}");
            assert!((on / mass - p).abs() < 1e-4, "p={p} c={c}: {}", on / mass);
        }
    }
}

#[test]
fn isolated_pair_keeps_its_prior_two_dimensions() {
    let (l, n) = (7.0, 56);
    let h = 2.0 * l / n as f64;
    let grid: Vec<(f64, f64)> = (0..=n)
        .map(|i| (-l + i as f64 * h, if i == 0 || i == n { 0.5 } else { 1.0 }))
        .collect();
    for &p in &[0.1f64, 0.9] {
        let c = [0.5, 2.0];
        let logit = (p / (1.0 - p)).ln();
        let (mut mass, mut on) = (0.0, 0.0);
        for &(a0, w0) in &grid {
            for &(a1, w1) in &grid {
                for &(b0, w2) in &grid {
                    for &(b1, w3) in &grid {
                        let wt = w0 * w1 * w2 * w3 * phi(a0) * phi(a1) * phi(b0) * phi(b1);
                        let (fi, fj) = ([a0, a1], [b0, b1]);
                        let m = log_robust_factor(&fi, &fj, &c, logit).unwrap().exp();
                        mass += wt * m;
                        on += wt * m * sigmoid(posterior_logodds(&fi, &fj, &c, logit).unwrap());
                    }
                }
            }
        }
        let scale = h.powi(4);
        assert!((mass * scale - 1.0).abs() < 1e-4, "mass {}", mass * scale);
        assert!((on / mass - p).abs() < 1e-4, "p={p}: {}", on / mass);
    }
}
