//! The training objective: value and gradient of
//!
//! ```text
//!   ELBO(x) = E_{q_φ(z|x)}[log p_θ(x, z)] + β · H[q_φ(z|x)]
//! ```
//!
//! with respect to every decoder and encoder parameter at once, under a
//! pluggable estimator for the expectation term. The entropy term is never
//! estimated: it is the exact dynamic program, recorded on the tape so its
//! gradient reaches the encoder.
//!
//! How the expectation term is handled per estimator:
//!
//! * exact — enumerate all state paths, record `Σ_z q(z) log p(x, z)`
//!   and differentiate it (oracle scale only).
//! * reinforce_ms / reinforce_ms_c — hard FFBS draws; the φ gradient is the
//!   score-function term with a leave-one-out baseline (plus a constant
//!   shift for the `_c` variant), the θ gradient flows through
//!   `log p(x, ẑ)` directly since q does not depend on θ.
//! * gumbel_crf(_st) — relaxed backward sampling recorded end to end; the
//!   decoder consumes the soft rows, straight-through feeds hard one-hots
//!   forward.
//! * pm_mrf(_st) — same, with relaxed Viterbi on noise-perturbed potentials.
//!
//! Gradients come back in one flat layout: [`GenerativeParams`] flattening
//! followed by [`InferenceParams`] flattening.

use crate::decoder::{one_hot_rows, record_joint, ThetaNodes};
use crate::encoder::{record_encoder, PhiNodes};
use crate::error::VaeError;
use crate::params::{GenerativeParams, InferenceParams};
use crf_core::{enumerate_posterior, forward, PotentialTable, DEFAULT_ENUMERATION_CAP};
use estimators::record::{
    perturb_on_tape, record_entropy, record_forward, record_gumbelized_ffbs,
    record_path_log_prob, record_relaxed_viterbi, RelaxedTapePath, TapePotentials, TapeTrellis,
};
use estimators::{EstimatorKind, GradAccumulator, GradReport};
use grad_engine::{NodeId, Tape};
use ndarray::Ix2;
use std::time::Instant;
use structured_sampling::{ffbs_with_noise, FfbsNoise, GumbelNoiseStream, PerturbNoise};

/// Knobs for one ELBO estimate.
#[derive(Debug, Clone)]
pub struct ElboOptions {
    /// Monte-Carlo samples per estimate. Relaxed estimators accept 1; the
    /// score-function family needs at least 2 for its baseline.
    pub n_samples: usize,
    /// Relaxation temperature for the pathwise estimators.
    pub tau: f64,
    /// Entropy coefficient β ≥ 0.
    pub beta_entropy: f64,
    /// Constant added to the baseline by `reinforce_ms_c`.
    pub baseline_shift: f64,
    /// Whether `pm_mrf` perturbs transition rows as well as emissions.
    pub perturb_transitions: bool,
    /// Path-count guard for the exact estimator.
    pub enumeration_cap: u128,
}

impl Default for ElboOptions {
    fn default() -> Self {
        ElboOptions {
            n_samples: 1,
            tau: 1.0,
            beta_entropy: 1.0,
            baseline_shift: 0.0,
            perturb_transitions: false,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

/// One finished ELBO estimate.
#[derive(Debug, Clone)]
pub struct ElboEstimate {
    /// Mean objective over the Monte-Carlo samples, entropy term included.
    /// For straight-through estimators this is an unbiased ELBO estimate;
    /// for the plain relaxed ones it is the relaxed surrogate's value.
    pub value: f64,
    /// Exact posterior entropy `H[q_φ(z|x)]` for this example.
    pub entropy: f64,
    /// Gradient report over the flattened `(θ, φ)` parameters.
    pub report: GradReport,
}

/// Everything every estimator records first: parameter leaves, encoder
/// potentials, forward trellis and the exact entropy.
struct Posterior {
    theta_nodes: ThetaNodes,
    phi_nodes: PhiNodes,
    pots: TapePotentials,
    trellis: TapeTrellis,
    entropy: NodeId,
}

fn record_posterior(
    tape: &mut Tape,
    theta: &GenerativeParams,
    phi: &InferenceParams,
    x: &[usize],
) -> Result<Posterior, VaeError> {
    let theta_nodes = ThetaNodes::leaves(tape, theta)?;
    let phi_nodes = PhiNodes::leaves(tape, phi)?;
    let pots = record_encoder(tape, &phi_nodes, x)?;
    let trellis = record_forward(tape, &pots)?;
    let entropy = record_entropy(tape, &pots, &trellis)?;
    Ok(Posterior {
        theta_nodes,
        phi_nodes,
        pots,
        trellis,
        entropy,
    })
}

fn read_all_grads(tape: &Tape, rec: &Posterior, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    rec.theta_nodes.read_grads(tape, &mut out);
    rec.phi_nodes.read_grads(tape, &mut out);
    debug_assert_eq!(out.len(), dim);
    out
}

/// The recorded potentials as a plain table, for value-level sampling.
fn value_table(
    tape: &Tape,
    pots: &TapePotentials,
    phi: &InferenceParams,
) -> Result<PotentialTable, VaeError> {
    let emission = tape
        .value(pots.emission)
        .clone()
        .into_dimensionality::<Ix2>()
        .expect("emission is rank 2");
    Ok(PotentialTable::new(
        phi.transition.clone(),
        emission,
        vec![0.0; pots.num_states],
    )?)
}

/// Estimates the ELBO and its gradient for one example.
///
/// `dropout` optionally masks word inputs to the decoder (see
/// [`record_joint`]); the inference network always reads the full sequence.
pub fn elbo(
    theta: &GenerativeParams,
    phi: &InferenceParams,
    x: &[usize],
    kind: EstimatorKind,
    opts: &ElboOptions,
    stream: &mut GumbelNoiseStream,
    dropout: Option<&[bool]>,
) -> Result<ElboEstimate, VaeError> {
    if theta.num_states() != phi.num_states() || theta.num_words() != phi.num_words() {
        return Err(VaeError::BadParams(format!(
            "decoder is over ({} words, {} states), encoder over ({}, {})",
            theta.num_words(),
            theta.num_states(),
            phi.num_words(),
            phi.num_states()
        )));
    }
    if !(opts.beta_entropy >= 0.0 && opts.beta_entropy.is_finite()) {
        return Err(VaeError::BadOptions(format!(
            "entropy coefficient must be finite and nonnegative, got {}",
            opts.beta_entropy
        )));
    }
    if opts.n_samples == 0 && kind != EstimatorKind::Exact {
        return Err(VaeError::TooFewSamples {
            estimator: kind.name(),
            min: 1,
            got: 0,
        });
    }
    match kind {
        EstimatorKind::Exact => exact(theta, phi, x, opts, dropout),
        EstimatorKind::ReinforceMs => {
            score_function(theta, phi, x, kind, opts, stream, dropout, 0.0)
        }
        EstimatorKind::ReinforceMsC => score_function(
            theta,
            phi,
            x,
            kind,
            opts,
            stream,
            dropout,
            opts.baseline_shift,
        ),
        _ => pathwise(theta, phi, x, kind, opts, stream, dropout),
    }
}

fn pathwise(
    theta: &GenerativeParams,
    phi: &InferenceParams,
    x: &[usize],
    kind: EstimatorKind,
    opts: &ElboOptions,
    stream: &mut GumbelNoiseStream,
    dropout: Option<&[bool]>,
) -> Result<ElboEstimate, VaeError> {
    if !(opts.tau > 0.0 && opts.tau.is_finite()) {
        return Err(VaeError::BadOptions(format!(
            "temperature must be positive and finite, got {}",
            opts.tau
        )));
    }
    let start = Instant::now();
    let dim = theta.dim() + phi.dim();
    let straight_through = matches!(kind, EstimatorKind::GumbelCrfSt | EstimatorKind::PmMrfSt);
    let mut acc = GradAccumulator::new(dim);
    let mut entropy_value = 0.0;
    for _ in 0..opts.n_samples {
        let mut tape = Tape::new();
        let rec = record_posterior(&mut tape, theta, phi, x)?;
        let (k, t_len) = (rec.pots.num_states, rec.pots.seq_len);
        let relaxed: RelaxedTapePath = match kind {
            EstimatorKind::GumbelCrf | EstimatorKind::GumbelCrfSt => {
                let noise = FfbsNoise::draw(stream, k, t_len);
                record_gumbelized_ffbs(&mut tape, &rec.pots, &rec.trellis, &noise, opts.tau)?
            }
            EstimatorKind::PmMrf | EstimatorKind::PmMrfSt => {
                let noise = PerturbNoise::draw(stream, k, t_len, opts.perturb_transitions);
                let perturbed = perturb_on_tape(&mut tape, &rec.pots, &noise)?;
                record_relaxed_viterbi(&mut tape, &perturbed, opts.tau)?
            }
            _ => unreachable!("pathwise called with {kind:?}"),
        };
        let rows: Vec<NodeId> = if straight_through {
            let mut out = Vec::with_capacity(t_len);
            for (&hz, &soft) in relaxed.hard.iter().zip(&relaxed.soft_rows) {
                let mut onehot = vec![0.0; k];
                onehot[hz] = 1.0;
                let hard_node = tape.vector(&onehot);
                out.push(tape.straight_through(hard_node, soft)?);
            }
            out
        } else {
            relaxed.soft_rows.clone()
        };
        let f = record_joint(&mut tape, &rec.theta_nodes, x, &rows, dropout)?;
        let scaled_entropy = tape.scale(rec.entropy, opts.beta_entropy)?;
        let objective = tape.add(f, scaled_entropy)?;
        tape.backward(objective)?;
        let grads = read_all_grads(&tape, &rec, dim);
        acc.push(&grads, tape.value_scalar(objective));
        entropy_value = tape.value_scalar(rec.entropy);
    }
    finish(kind, acc, entropy_value, start)
}

#[allow(clippy::too_many_arguments)]
fn score_function(
    theta: &GenerativeParams,
    phi: &InferenceParams,
    x: &[usize],
    kind: EstimatorKind,
    opts: &ElboOptions,
    stream: &mut GumbelNoiseStream,
    dropout: Option<&[bool]>,
    shift: f64,
) -> Result<ElboEstimate, VaeError> {
    let n = opts.n_samples;
    if n < 2 {
        return Err(VaeError::TooFewSamples {
            estimator: kind.name(),
            min: 2,
            got: n,
        });
    }
    let start = Instant::now();
    let dim = theta.dim() + phi.dim();
    let mut tape = Tape::new();
    let rec = record_posterior(&mut tape, theta, phi, x)?;
    let (k, t_len) = (rec.pots.num_states, rec.pots.seq_len);

    let table = value_table(&tape, &rec.pots, phi)?;
    let trellis = forward(&table);
    let mut f_nodes = Vec::with_capacity(n);
    let mut logq_nodes = Vec::with_capacity(n);
    for _ in 0..n {
        let noise = FfbsNoise::draw(stream, k, t_len);
        let path = ffbs_with_noise(&table, &trellis, &noise)?;
        let rows = one_hot_rows(&mut tape, &path, k);
        f_nodes.push(record_joint(&mut tape, &rec.theta_nodes, x, &rows, dropout)?);
        logq_nodes.push(record_path_log_prob(
            &mut tape,
            &rec.pots,
            &rec.trellis,
            &path,
        )?);
    }
    let f_values: Vec<f64> = f_nodes.iter().map(|&id| tape.value_scalar(id)).collect();
    let total: f64 = f_values.iter().sum();
    let entropy_value = tape.value_scalar(rec.entropy);
    let scaled_entropy = tape.scale(rec.entropy, opts.beta_entropy)?;

    // Per-sample surrogate: (f_i - b_i - c) log q(ẑ_i) + log p(x, ẑ_i)
    // + β H. The first term exists only for its φ gradient (the reward
    // coefficient is detached); the sample's objective value is
    // log p(x, ẑ_i) + β H.
    let mut acc = GradAccumulator::new(dim);
    for i in 0..n {
        let baseline = (total - f_values[i]) / (n - 1) as f64;
        let coeff = f_values[i] - baseline - shift;
        let score_term = tape.scale(logq_nodes[i], coeff)?;
        let with_reward = tape.add(score_term, f_nodes[i])?;
        let surrogate = tape.add(with_reward, scaled_entropy)?;
        tape.backward(surrogate)?;
        let grads = read_all_grads(&tape, &rec, dim);
        acc.push(&grads, f_values[i] + opts.beta_entropy * entropy_value);
    }
    finish(kind, acc, entropy_value, start)
}

fn exact(
    theta: &GenerativeParams,
    phi: &InferenceParams,
    x: &[usize],
    opts: &ElboOptions,
    dropout: Option<&[bool]>,
) -> Result<ElboEstimate, VaeError> {
    let start = Instant::now();
    let dim = theta.dim() + phi.dim();
    let mut tape = Tape::new();
    let rec = record_posterior(&mut tape, theta, phi, x)?;
    let table = value_table(&tape, &rec.pots, phi)?;
    let posterior = enumerate_posterior(&table, opts.enumeration_cap)?;

    let mut expectation: Option<NodeId> = None;
    for path in posterior.paths() {
        let rows = one_hot_rows(&mut tape, path, rec.pots.num_states);
        let f = record_joint(&mut tape, &rec.theta_nodes, x, &rows, dropout)?;
        let logq = record_path_log_prob(&mut tape, &rec.pots, &rec.trellis, path)?;
        let weight = tape.exp(logq)?;
        let term = tape.mul(weight, f)?;
        expectation = Some(match expectation {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let expectation = expectation.expect("at least one path");
    let scaled_entropy = tape.scale(rec.entropy, opts.beta_entropy)?;
    let objective = tape.add(expectation, scaled_entropy)?;
    tape.backward(objective)?;
    let mean_grad = read_all_grads(&tape, &rec, dim);
    let value = tape.value_scalar(objective);
    let report = GradReport {
        estimator: EstimatorKind::Exact.name().to_string(),
        n_samples: posterior.paths().len(),
        param_dim: dim,
        mean_grad,
        var_grad: vec![0.0; dim],
        log_variance_ratio: None,
        degenerate: Some("exact_enumeration".to_string()),
        mean_objective: value,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok(ElboEstimate {
        value,
        entropy: tape.value_scalar(rec.entropy),
        report,
    })
}

fn finish(
    kind: EstimatorKind,
    acc: GradAccumulator,
    entropy: f64,
    start: Instant,
) -> Result<ElboEstimate, VaeError> {
    let report = GradReport::from_accumulator(
        kind.name().to_string(),
        &acc,
        start.elapsed().as_secs_f64(),
    )?;
    Ok(ElboEstimate {
        value: report.mean_objective,
        entropy,
        report,
    })
}
