//! Numerical gradient checking support.
//!
//! Used by the test suites to validate every analytic gradient against
//! central finite differences. Lives in the library (rather than a test
//! module) so integration tests of downstream crates can reuse it.

/// Central-difference gradient of a scalar function at `x`.
///
/// The closure is called with a perturbed copy of `x` and must rebuild its
/// computation from scratch (e.g. a fresh tape) on every call.
pub fn numerical_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error between an analytic gradient and a
/// numerical one: `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_polynomial_derivative() {
        // f(x, y) = x^2 y + y^3 at (2, 3): df/dx = 12, df/dy = 31
        let f = |v: &[f64]| v[0] * v[0] * v[1] + v[1].powi(3);
        let g = numerical_grad(f, &[2.0, 3.0], 1e-6);
        assert!((g[0] - 12.0).abs() < 1e-6);
        assert!((g[1] - 31.0).abs() < 1e-6);
    }

    #[test]
    fn rel_err_scales() {
        assert!(max_rel_err(&[1.0, 2.0], &[1.0, 2.0]) == 0.0);
        let e = max_rel_err(&[100.0], &[101.0]);
        assert!((e - 1.0 / 101.0).abs() < 1e-12);
    }
}
