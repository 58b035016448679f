//! Finite-difference gradient checking used throughout the test suite.
//!
//! All backward passes in this crate are hand-written; these helpers verify
//! them against central differences in 64-bit arithmetic.

use ndarray::{Array, Dimension};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Default step for central differences.
pub const FD_EPS: f64 = 1e-5;

/// Relative error with an absolute floor so near-zero pairs do not blow up.
pub fn relative_error(numeric: f64, analytic: f64) -> f64 {
    (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8)
}

/// Central-difference gradient of a scalar function at `x`.
pub fn numeric_gradient<D, F>(mut f: F, x: &Array<f64, D>, eps: f64) -> Array<f64, D>
where
    D: Dimension,
    F: FnMut(&Array<f64, D>) -> f64,
{
    let mut probe = x.to_owned();
    let n = probe.len();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        let orig = probe.as_slice_mut().expect("standard layout")[i];
        probe.as_slice_mut().unwrap()[i] = orig + eps;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - eps;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        grad[i] = (fp - fm) / (2.0 * eps);
    }
    Array::from_shape_vec(x.raw_dim(), grad).unwrap()
}

/// Central differences at selected flat indices only. For large tensors
/// where probing every element would be too slow; pair with
/// [`relative_error`] against the analytic gradient at the same indices.
pub fn numeric_gradient_at<D, F>(
    mut f: F,
    x: &Array<f64, D>,
    indices: &[usize],
    eps: f64,
) -> Vec<f64>
where
    D: Dimension,
    F: FnMut(&Array<f64, D>) -> f64,
{
    let mut probe = x.to_owned();
    let mut grads = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = probe.as_slice_mut().expect("standard layout")[i];
        probe.as_slice_mut().unwrap()[i] = orig + eps;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig - eps;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[i] = orig;
        grads.push((fp - fm) / (2.0 * eps));
    }
    grads
}

/// Largest element-wise relative error between two gradient arrays.
pub fn max_relative_error<D: Dimension>(
    numeric: &Array<f64, D>,
    analytic: &Array<f64, D>,
) -> f64 {
    assert_eq!(numeric.raw_dim(), analytic.raw_dim(), "gradient shape mismatch");
    numeric
        .iter()
        .zip(analytic.iter())
        .map(|(n, a)| relative_error(*n, *a))
        .fold(0.0, f64::max)
}

/// Deterministic uniform array in `[lo, hi)`, seeded for reproducible tests.
pub fn seeded_uniform<D>(dim: D, seed: u64, lo: f64, hi: f64) -> Array<f64, D>
where
    D: Dimension,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array::from_shape_simple_fn(dim, || rng.random_range(lo..hi))
}
