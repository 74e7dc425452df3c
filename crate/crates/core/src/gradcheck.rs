//! Central finite-difference gradient oracle, test-only.
//!
//! The oracle rebuilds the computation from scratch for every probe, so it is
//! independent of the tape's backward pass.

use crate::tensor::Tensor;

/// Central finite difference of `f` at `x`, coordinate `i`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[i] += h;
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

/// Max relative error between an analytic gradient and the finite-difference
/// oracle over all coordinates: `|ad - fd| / (|fd| + 1e-8)`.
pub fn max_rel_err(f: &dyn Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(x.len(), analytic.len());
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let fd = central_diff(f, x, i, h);
        let rel = (analytic[i] - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Random tensor with entries in `[-1, 1)`, for gradcheck probes.
pub fn rand_tensor(shape: Vec<usize>, rng: &mut impl rand::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}
