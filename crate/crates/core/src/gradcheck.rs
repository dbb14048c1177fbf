//! Central finite differences for checking analytic gradients.

/// Denominator floor for [`relative_error`], so components that are
/// essentially zero are compared in absolute terms.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-4;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Largest componentwise [`relative_error`].
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
