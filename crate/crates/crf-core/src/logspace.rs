//! Shared log-space numeric kernels.
//!
//! Both the value-level samplers and the tape-recorded versions of the same
//! recursions call these routines, so hard paths produced on either side of
//! that divide agree bit for bit. Keep the iteration order and the
//! max-subtraction scheme here stable.

/// `log(sum_i exp(xs[i]))` with the max subtracted before exponentiation.
///
/// Returns `-inf` for an all-`-inf` (or empty) input. Entries must not be
/// `NaN`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        debug_assert!(!x.is_nan(), "logsumexp over NaN");
        if x > m {
            m = x;
        }
    }
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut s = 0.0;
    for &x in xs {
        s += (x - m).exp();
    }
    m + s.ln()
}

/// Index of the largest entry, ties broken toward the lowest index.
///
/// `-inf` entries lose to anything finite; an all-`-inf` slice returns 0.
/// Entries must not be `NaN`.
pub fn argmax(xs: &[f64]) -> usize {
    debug_assert!(!xs.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        debug_assert!(!x.is_nan(), "argmax over NaN");
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Tempered softmax `out[i] = exp(xs[i]/tau) / sum_j exp(xs[j]/tau)`,
/// computed as `exp((xs[i]-max)/tau)` then normalized.
///
/// `tau` must be positive and at least one entry must be finite. `-inf`
/// entries get probability exactly 0.
pub fn softmax_tempered_into(xs: &[f64], tau: f64, out: &mut [f64]) {
    debug_assert!(tau > 0.0, "softmax temperature must be positive");
    debug_assert_eq!(xs.len(), out.len());
    let m = xs[argmax(xs)];
    debug_assert!(
        m > f64::NEG_INFINITY,
        "softmax over an all-forbidden score vector"
    );
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = ((x - m) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Allocating convenience wrapper around [`softmax_tempered_into`].
pub fn softmax_tempered(xs: &[f64], tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    softmax_tempered_into(xs, tau, &mut out);
    out
}

/// `x * ln(x)` with the measure-theoretic convention `0 * ln(0) = 0`.
pub fn xlnx(x: f64) -> f64 {
    debug_assert!(x >= 0.0, "xlnx of negative input");
    if x == 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}
