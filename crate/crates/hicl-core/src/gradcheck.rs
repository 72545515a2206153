//! Central finite-difference gradient oracle.
//!
//! Uses only forward evaluations, so it is independent of the backward
//! rules it is used to check.

/// Central-difference gradient of `f` at `x` with the given step.
pub fn finite_diff_grad<F>(f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let plus = f(&probe);
        probe[i] = orig - step;
        let minus = f(&probe);
        probe[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

/// Maximum relative error between analytic and numeric gradients.
///
/// Per-element error is |a−n| / max(|a|, |n|, 1e-6); the floor keeps
/// finite-difference noise on near-zero gradients from registering as a
/// large relative error.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

/// Convenience: finite-difference check of `f` against `analytic` at `x`.
/// Returns the max relative error.
pub fn check_against<F>(f: F, x: &[f64], analytic: &[f64], step: f64) -> f64
where
    F: Fn(&[f64]) -> f64,
{
    let numeric = finite_diff_grad(f, x, step);
    max_rel_err(analytic, &numeric)
}
