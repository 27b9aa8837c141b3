use crate::{FfbsNoise, GumbelNoiseStream, SampleError};
use crf_core::logspace::{argmax, softmax_tempered};
use crf_core::{ForwardTrellis, HardPath, PotentialTable};
use ndarray::Array2;

/// One Gumbel-max draw from the unnormalized categorical `log_weights`:
/// `argmax_i(log_weights[i] + g_i)` with i.i.d. standard Gumbel `g`.
pub fn gumbel_max(
    log_weights: &[f64],
    stream: &mut GumbelNoiseStream,
) -> Result<usize, SampleError> {
    if log_weights.iter().all(|&w| w == f64::NEG_INFINITY) {
        return Err(SampleError::AllForbidden);
    }
    let perturbed: Vec<f64> = log_weights
        .iter()
        .map(|&w| w + stream.next_gumbel())
        .collect();
    Ok(argmax(&perturbed))
}

/// Relaxed counterpart of [`gumbel_max`] sharing its noise: returns the
/// tempered softmax `softmax((log_weights + g) / tau)` together with the
/// hard index `argmax` of that vector. As `tau -> 0` the soft vector
/// approaches the one-hot of the hard index.
pub fn gumbel_softmax(
    log_weights: &[f64],
    tau: f64,
    stream: &mut GumbelNoiseStream,
) -> Result<(Vec<f64>, usize), SampleError> {
    if !(tau > 0.0) {
        return Err(SampleError::BadTemperature(tau));
    }
    if log_weights.iter().all(|&w| w == f64::NEG_INFINITY) {
        return Err(SampleError::AllForbidden);
    }
    let perturbed: Vec<f64> = log_weights
        .iter()
        .map(|&w| w + stream.next_gumbel())
        .collect();
    let soft = softmax_tempered(&perturbed, tau);
    let hard = argmax(&soft);
    Ok((soft, hard))
}

/// A relaxed sample: per-position soft assignments plus the coupled hard
/// path (`hard[t] = argmax of soft row t`).
#[derive(Debug, Clone)]
pub struct RelaxedPath {
    pub hard: HardPath,
    /// Row `t` is the soft assignment over states at position `t`.
    pub soft: Array2<f64>,
    pub tau: f64,
}

impl RelaxedPath {
    /// `max_t || soft_t - onehot(hard_t) ||_inf`, which for a normalized row
    /// equals `max_t (1 - soft[t][hard[t]])`. Goes to 0 as `tau -> 0`.
    pub fn max_gap(&self) -> f64 {
        self.hard
            .iter()
            .enumerate()
            .map(|(t, &z)| 1.0 - self.soft[[t, z]])
            .fold(0.0, f64::max)
    }
}

fn check_dims(
    table: &PotentialTable,
    trellis: &ForwardTrellis,
    noise: &FfbsNoise,
) -> Result<(), SampleError> {
    let (k, t) = (table.num_states(), table.seq_len());
    if trellis.log_alpha.dim() != (t, k) {
        return Err(SampleError::DimensionMismatch(format!(
            "trellis is {:?}, table is ({t}, {k})",
            trellis.log_alpha.dim()
        )));
    }
    if noise.seq_len() != t || noise.num_states() != k {
        return Err(SampleError::DimensionMismatch(format!(
            "noise block is ({}, {}), table is ({t}, {k})",
            noise.seq_len(),
            noise.num_states()
        )));
    }
    if trellis.log_z == f64::NEG_INFINITY {
        return Err(SampleError::AllForbidden);
    }
    Ok(())
}

/// Log-weights of the categorical sampled at position `t` given the state
/// already chosen at `t + 1` (or the final-position weights when
/// `next == None`). Shared between the exact and relaxed samplers — and
/// mirrored by the tape recorder — so all of them see identical numbers.
fn step_log_weights(
    table: &PotentialTable,
    trellis: &ForwardTrellis,
    t: usize,
    next: Option<usize>,
) -> Vec<f64> {
    let k = table.num_states();
    match next {
        None => trellis.log_alpha.row(t).to_vec(),
        Some(j) => (0..k)
            .map(|i| trellis.log_alpha[[t, i]] + table.log_transition()[[i, j]])
            .collect(),
    }
}

/// Exact posterior draw by forward-filtering backward-sampling, with every
/// categorical realized via Gumbel-max on `noise`.
///
/// The final state is drawn from the last forward row; earlier states from
/// `log_alpha[t][i] + log_transition[i][z_{t+1}]`. Normalization constants
/// are omitted throughout — argmax is shift-invariant.
pub fn ffbs_with_noise(
    table: &PotentialTable,
    trellis: &ForwardTrellis,
    noise: &FfbsNoise,
) -> Result<HardPath, SampleError> {
    check_dims(table, trellis, noise)?;
    let t_len = table.seq_len();
    let mut path = vec![0usize; t_len];
    for t in (0..t_len).rev() {
        let next = if t + 1 < t_len { Some(path[t + 1]) } else { None };
        let weights = step_log_weights(table, trellis, t, next);
        if weights.iter().all(|&w| w == f64::NEG_INFINITY) {
            return Err(SampleError::AllForbidden);
        }
        let perturbed: Vec<f64> = weights
            .iter()
            .zip(noise.at(t))
            .map(|(&w, &g)| w + g)
            .collect();
        path[t] = argmax(&perturbed);
    }
    Ok(path)
}

/// [`ffbs_with_noise`] drawing its own noise block from `stream`.
pub fn ffbs(
    table: &PotentialTable,
    trellis: &ForwardTrellis,
    stream: &mut GumbelNoiseStream,
) -> Result<HardPath, SampleError> {
    let noise = FfbsNoise::draw(stream, table.num_states(), table.seq_len());
    ffbs_with_noise(table, trellis, &noise)
}

/// Relaxed FFBS: the same backward pass as [`ffbs_with_noise`], but each
/// Gumbel-max is replaced by a tempered softmax over the same perturbed
/// weights. Conditioning always uses the hard state, so under a shared
/// noise block the hard path is the exact FFBS draw while the soft rows
/// carry the gradient signal.
pub fn gumbelized_ffbs_with_noise(
    table: &PotentialTable,
    trellis: &ForwardTrellis,
    tau: f64,
    noise: &FfbsNoise,
) -> Result<RelaxedPath, SampleError> {
    if !(tau > 0.0) {
        return Err(SampleError::BadTemperature(tau));
    }
    check_dims(table, trellis, noise)?;
    let (k, t_len) = (table.num_states(), table.seq_len());
    let mut hard = vec![0usize; t_len];
    let mut soft = Array2::zeros((t_len, k));
    for t in (0..t_len).rev() {
        let next = if t + 1 < t_len { Some(hard[t + 1]) } else { None };
        let weights = step_log_weights(table, trellis, t, next);
        if weights.iter().all(|&w| w == f64::NEG_INFINITY) {
            return Err(SampleError::AllForbidden);
        }
        let perturbed: Vec<f64> = weights
            .iter()
            .zip(noise.at(t))
            .map(|(&w, &g)| w + g)
            .collect();
        let row = softmax_tempered(&perturbed, tau);
        hard[t] = argmax(&row);
        for (j, v) in row.into_iter().enumerate() {
            soft[[t, j]] = v;
        }
    }
    Ok(RelaxedPath { hard, soft, tau })
}

/// [`gumbelized_ffbs_with_noise`] drawing its own noise block.
pub fn gumbelized_ffbs(
    table: &PotentialTable,
    trellis: &ForwardTrellis,
    tau: f64,
    stream: &mut GumbelNoiseStream,
) -> Result<RelaxedPath, SampleError> {
    let noise = FfbsNoise::draw(stream, table.num_states(), table.seq_len());
    gumbelized_ffbs_with_noise(table, trellis, tau, &noise)
}
