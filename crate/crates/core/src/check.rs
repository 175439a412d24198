//! Finite-difference gradient checking.
//!
//! Shared by the `gradcheck` command and the test suite. The error measure is
//! relative with an absolute floor: `|a - n| / max(|a|, |n|, 1e-3)`, so at the
//! 1e-4 acceptance threshold entries below 1e-3 in magnitude are effectively
//! held to an absolute tolerance of 1e-7.

/// Step size for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Acceptance threshold for gradient agreement.
pub const GRAD_TOL: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central finite difference of a scalar function at `xs`.
pub fn central_diff(xs: &[f64], mut eval: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = xs.to_vec();
    let mut grad = vec![0.0; xs.len()];
    for i in 0..xs.len() {
        let orig = work[i];
        work[i] = orig + FD_STEP;
        let fp = eval(&work);
        work[i] = orig - FD_STEP;
        let fm = eval(&work);
        work[i] = orig;
        grad[i] = (fp - fm) / (2.0 * FD_STEP);
    }
    grad
}
