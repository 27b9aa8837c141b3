//! Likelihood evaluation on the discrete model (no relaxation anywhere):
//! importance-sampled NLL with the inference network as proposal, and exact
//! enumeration at oracle scale.

use crate::decoder::joint_log_prob_hard;
use crate::encoder::potential_table;
use crate::error::VaeError;
use crate::params::{GenerativeParams, InferenceParams};
use crf_core::logspace::logsumexp;
use crf_core::{forward, path_log_prob};
use structured_sampling::{ffbs_with_noise, FfbsNoise, GumbelNoiseStream};

/// `-log( (1/n) Σ_k p_θ(x, ẑ_k) / q_φ(ẑ_k | x) )` over hard FFBS draws
/// `ẑ_k ~ q_φ(z | x)`.
///
/// An unbiased importance estimate of the marginal likelihood, so the NLL
/// estimate is consistent (and biased low in expectation by Jensen, i.e.
/// conservative as a bound on model quality). With `q` equal to the true
/// posterior every weight collapses to `p_θ(x)` and the estimate is exact
/// with zero variance.
pub fn importance_nll(
    theta: &GenerativeParams,
    phi: &InferenceParams,
    x: &[usize],
    n_samples: usize,
    stream: &mut GumbelNoiseStream,
) -> Result<f64, VaeError> {
    if n_samples == 0 {
        return Err(VaeError::BadOptions(
            "importance sampling needs at least one draw".into(),
        ));
    }
    if theta.num_states() != phi.num_states() || theta.num_words() != phi.num_words() {
        return Err(VaeError::BadParams(
            "decoder and encoder disagree on vocabulary or state count".into(),
        ));
    }
    let table = potential_table(phi, x)?;
    let trellis = forward(&table);
    let mut log_weights = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let noise = FfbsNoise::draw(stream, table.num_states(), table.seq_len());
        let path = ffbs_with_noise(&table, &trellis, &noise)?;
        let log_p = joint_log_prob_hard(theta, x, &path, None)?;
        let log_q = path_log_prob(&table, &trellis, &path)?;
        log_weights.push(log_p - log_q);
    }
    Ok(-(logsumexp(&log_weights) - (n_samples as f64).ln()))
}

/// Exact `log p_θ(x)` by summing the joint over all `K^T` state paths.
/// Guarded by `cap`; this is an oracle for small instances, not a training
/// primitive.
pub fn exact_log_marginal(
    theta: &GenerativeParams,
    x: &[usize],
    cap: u128,
) -> Result<f64, VaeError> {
    if x.is_empty() {
        return Err(VaeError::BadInput("empty word sequence".into()));
    }
    let k = theta.num_states();
    let n_paths = (k as u128)
        .checked_pow(x.len() as u32)
        .filter(|&n| n <= cap)
        .ok_or_else(|| {
            VaeError::BadOptions(format!(
                "{k}^{} state paths exceed the enumeration cap {cap}",
                x.len()
            ))
        })?;
    let mut scores = Vec::with_capacity(n_paths as usize);
    let mut path = vec![0usize; x.len()];
    loop {
        scores.push(joint_log_prob_hard(theta, x, &path, None)?);
        // Odometer increment in base K.
        let mut t = 0;
        loop {
            if t == path.len() {
                return Ok(logsumexp(&scores));
            }
            path[t] += 1;
            if path[t] < k {
                break;
            }
            path[t] = 0;
            t += 1;
        }
    }
}
