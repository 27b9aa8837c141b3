//! Finite-difference oracles for gradient verification.

/// Central-difference gradient of `f` at `x`: `(f(x + h e_i) - f(x - h e_i))
/// / 2h` per coordinate. `f` may rebuild a tape on every call.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe);
        probe[i] = x[i] - step;
        let down = f(&probe);
        probe[i] = x[i];
        out.push((up - down) / (2.0 * step));
    }
    out
}

/// Denominator floor for [`max_rel_err`]. Central differences at step 1e-5
/// carry ~1e-11 of rounding noise on O(1) functions, so coordinates smaller
/// than this floor are effectively compared absolutely (at `floor * tol`)
/// instead of drowning in that noise.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Largest per-coordinate relative error between two gradients, with the
/// [`REL_ERR_FLOOR`] keeping near-zero coordinates on an absolute scale.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

/// Largest per-coordinate absolute error.
pub fn max_abs_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).fold(0.0, f64::max)
}
