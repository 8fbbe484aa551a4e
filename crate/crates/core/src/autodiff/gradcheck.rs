//! Central-difference gradient checking.

/// Outcome of a [`grad_check`] run.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares the analytic gradient returned by `f` against fourth-order
/// central differences with the given `step`, coordinate by coordinate.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, 1e-6)`;
/// the floor keeps round-off on near-zero gradients from dominating.
pub fn grad_check<F>(f: F, point: &[f64], step: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    grad_check_with_floor(f, point, step, 1e-6)
}

pub fn grad_check_with_floor<F>(mut f: F, point: &[f64], step: f64, floor: f64) -> GradCheckReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(point);
    assert_eq!(
        analytic.len(),
        point.len(),
        "gradient length does not match the point"
    );
    let mut x = point.to_vec();
    let mut numeric = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        let mut at = |d: f64| {
            x[i] = orig + d;
            f(&x).0
        };
        let (p1, m1, p2, m2) = (at(step), at(-step), at(2.0 * step), at(-2.0 * step));
        x[i] = orig;
        numeric.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step));
    }
    let (worst_index, max_rel_err) = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    GradCheckReport {
        max_rel_err,
        worst_index,
        analytic,
        numeric,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_at_three() {
        let r = grad_check(|x| (x[0] * x[0], vec![2.0 * x[0]]), &[3.0], 1e-5);
        assert_eq!(r.analytic, vec![6.0]);
        assert!((r.numeric[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn sum_of_sines() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..3.0)).collect();
        let r = grad_check(
            |x| (x.iter().map(|v| v.sin()).sum(), x.iter().map(|v| v.cos()).collect()),
            &x,
            1e-5,
        );
        assert!(r.max_rel_err < 1e-7, "{}", r.max_rel_err);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Analytic claims 2x + 1 instead of 2x: at x = 3 the error is 1/7.
        let r = grad_check(|x| (x[0] * x[0], vec![2.0 * x[0] + 1.0]), &[3.0], 1e-5);
        assert!((r.max_rel_err - 1.0 / 7.0).abs() < 1e-6, "{}", r.max_rel_err);
    }
}
