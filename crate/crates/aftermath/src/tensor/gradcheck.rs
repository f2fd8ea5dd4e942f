//! Central finite-difference gradient checking.
//!
//! Numerically differentiates a scalar-valued function and compares against
//! analytic gradients. Kept free of any autodiff machinery so it can serve as
//! an independent oracle for the backward pass.

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference<F>(f: &mut F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(&work);
        work[i] = orig - h;
        let minus = f(&work);
        work[i] = orig;
        grad[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error between two gradients.
///
/// Elements where both values are below `atol` are treated as matching zeros.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], atol: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        if scale < atol {
            continue;
        }
        worst = worst.max((a - n).abs() / scale);
    }
    worst
}
