//! The estimators themselves.
//!
//! All of them differentiate `E_{z ~ p(.|table)}[f(z)]` with respect to the
//! table entries and return a [`GradReport`] in the
//! [`crate::record::flatten_order`] layout.
//!
//! * [`exact_gradient`] enumerates every path and differentiates the exact
//!   expectation on the tape, in chunks so the tape stays small.
//! * [`reinforce_ms`] / [`reinforce_ms_c`]: for each of `N >= 2` exact
//!   posterior draws, the contribution is `(f(z_i) - b_i) * grad log p(z_i)`
//!   with `b_i` the mean reward of the *other* samples (leave-one-out; the
//!   all-sample mean is available behind [`BaselineMode`]), plus an optional
//!   constant shift `c` in the `_c` variant. The score `grad log p(z)` is the
//!   sufficient-statistic identity: path counts minus their posterior
//!   expectation, the latter read off one backward pass through the recorded
//!   `log Z`.
//! * [`gumbel_crf`] / [`gumbel_crf_st`]: pathwise gradient through relaxed
//!   backward sampling; the `_st` variant feeds hard one-hots forward and
//!   routes gradients through the soft rows.
//! * [`pm_mrf`] / [`pm_mrf_st`]: pathwise gradient through relaxed Viterbi
//!   decoding of a Gumbel-perturbed table.
//!
//! Estimators draw their noise per sample from one stream in a fixed layout,
//! so two estimators run against forks of the same master seed see coupled
//! randomness.

use crate::record::{
    flatten_grads, leaf_potentials, param_dim, perturb_on_tape, record_forward,
    record_gumbelized_ffbs, record_path_score, record_relaxed_viterbi,
};
use crate::report::{GradAccumulator, GradReport};
use crate::{EstimatorError, Objective};
use crf_core::{enumerate_posterior, forward, PotentialTable};
use grad_engine::Tape;
use serde::{Deserialize, Serialize};
use std::str::FromStr;
use std::time::Instant;
use structured_sampling::{ffbs_with_noise, FfbsNoise, GumbelNoiseStream, PerturbNoise};

/// Which estimator to run. [`EstimatorKind::from_str`] accepts the same
/// names [`EstimatorKind::name`] prints, so CLI round trips are lossless.
/// Serialized form matches too (`"gumbel_crf_st"` and friends).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Exact,
    ReinforceMs,
    ReinforceMsC,
    GumbelCrf,
    GumbelCrfSt,
    PmMrf,
    PmMrfSt,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Exact => "exact",
            EstimatorKind::ReinforceMs => "reinforce_ms",
            EstimatorKind::ReinforceMsC => "reinforce_ms_c",
            EstimatorKind::GumbelCrf => "gumbel_crf",
            EstimatorKind::GumbelCrfSt => "gumbel_crf_st",
            EstimatorKind::PmMrf => "pm_mrf",
            EstimatorKind::PmMrfSt => "pm_mrf_st",
        }
    }

    pub fn all() -> [EstimatorKind; 7] {
        [
            EstimatorKind::Exact,
            EstimatorKind::ReinforceMs,
            EstimatorKind::ReinforceMsC,
            EstimatorKind::GumbelCrf,
            EstimatorKind::GumbelCrfSt,
            EstimatorKind::PmMrf,
            EstimatorKind::PmMrfSt,
        ]
    }

    /// Smallest sample count the estimator accepts. The score-function
    /// estimators need two for the leave-one-out baseline; the pathwise
    /// ones are already informative with one relaxed draw.
    pub fn min_samples(self) -> usize {
        match self {
            EstimatorKind::ReinforceMs | EstimatorKind::ReinforceMsC => 2,
            _ => 1,
        }
    }

    /// Whether the estimator differentiates through soft assignments (and
    /// therefore needs an objective with `accepts_soft`).
    pub fn is_relaxed(self) -> bool {
        matches!(
            self,
            EstimatorKind::GumbelCrf
                | EstimatorKind::GumbelCrfSt
                | EstimatorKind::PmMrf
                | EstimatorKind::PmMrfSt
        )
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = EstimatorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EstimatorKind::all()
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| EstimatorError::UnknownEstimator(s.to_string()))
    }
}

/// Which mean the score-function baseline uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BaselineMode {
    /// Mean reward of the other `N - 1` samples. Keeps the estimator
    /// unbiased because `b_i` is independent of sample `i`.
    #[default]
    LeaveOneOut,
    /// Mean reward of all `N` samples including the current one. Slightly
    /// cheaper, but the self-term shrinks the estimate by `(1 - 1/N)` —
    /// kept selectable for demonstrating exactly that.
    AllSampleMean,
}

/// Knobs shared by all estimators; unused fields are ignored per estimator.
#[derive(Debug, Clone, Copy)]
pub struct EstimateOptions {
    /// Monte-Carlo sample count `N`.
    pub n_samples: usize,
    /// Relaxation temperature for the pathwise estimators.
    pub tau: f64,
    /// Multiplicative scalar on the objective, default 1.
    pub reward_scale: f64,
    /// The constant `c` added to the baseline by [`reinforce_ms_c`].
    pub baseline_shift: f64,
    pub baseline: BaselineMode,
    /// Whether the Perturb-and-MAP family also perturbs the transition
    /// table (noise reused across positions).
    pub perturb_transitions: bool,
    /// Path-count cap for [`exact_gradient`].
    pub enumeration_cap: u128,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            n_samples: 128,
            tau: 1.0,
            reward_scale: 1.0,
            baseline_shift: 0.0,
            baseline: BaselineMode::LeaveOneOut,
            perturb_transitions: false,
            enumeration_cap: crf_core::DEFAULT_ENUMERATION_CAP,
        }
    }
}

fn check_dims(objective: &dyn Objective, table: &PotentialTable) -> Result<(), EstimatorError> {
    if objective.num_states() != table.num_states() {
        return Err(EstimatorError::BadOptions(format!(
            "objective expects {} states, table has {}",
            objective.num_states(),
            table.num_states()
        )));
    }
    Ok(())
}

/// The exact gradient of the enumerated expectation.
#[derive(Debug, Clone)]
pub struct ExactGradient {
    /// `grad E[f]` in flatten order.
    pub grad: Vec<f64>,
    /// The exact expectation `E[f]` itself.
    pub expectation: f64,
    /// Number of paths enumerated.
    pub n_paths: usize,
}

/// Paths per tape chunk in [`exact_gradient`]. Keeps each tape's node count
/// bounded; chunk gradients add because the expectation is a sum over paths.
const EXACT_CHUNK: usize = 1024;

/// Differentiates `E[f] = sum_z p(z) f(z)` exactly: enumerate every path,
/// record `exp(score(z) - log Z) * f(z)` on the tape, sum, and backprop.
pub fn exact_gradient(
    objective: &dyn Objective,
    table: &PotentialTable,
    cap: u128,
) -> Result<ExactGradient, EstimatorError> {
    check_dims(objective, table)?;
    let post = enumerate_posterior(table, cap)?;
    let (k, t_len) = (table.num_states(), table.seq_len());
    let mut grad = vec![0.0; param_dim(k, t_len)];
    let mut expectation = 0.0;
    for chunk in post.paths().chunks(EXACT_CHUNK) {
        let mut tape = Tape::new();
        let pots = leaf_potentials(&mut tape, table)?;
        let trellis = record_forward(&mut tape, &pots)?;
        let mut acc = tape.scalar(0.0);
        for path in chunk {
            let f_val = objective.eval_hard(path);
            let score = record_path_score(&mut tape, &pots, path)?;
            let log_p = tape.sub(score, trellis.log_z)?;
            let p = tape.exp(log_p)?;
            let weighted = tape.scale(p, f_val)?;
            acc = tape.add(acc, weighted)?;
            expectation += tape.value_scalar(weighted);
        }
        tape.backward(acc)?;
        for (g, d) in grad.iter_mut().zip(flatten_grads(&tape, &pots)) {
            *g += d;
        }
    }
    Ok(ExactGradient {
        grad,
        expectation,
        n_paths: post.paths().len(),
    })
}

/// Indicator counts of a path's factors, in flatten order: how often each
/// transition cell fires, which emission cells are active, which initial
/// state was used. `grad log p(z) = stats(z) - E[stats]` — the exponential-
/// family identity the score-function estimators are built on.
fn sufficient_stats_into(path: &[usize], k: usize, out: &mut [f64]) {
    out.fill(0.0);
    let t_len = path.len();
    for t in 1..t_len {
        out[path[t - 1] * k + path[t]] += 1.0;
    }
    for (t, &z) in path.iter().enumerate() {
        out[k * k + t * k + z] += 1.0;
    }
    out[k * k + t_len * k + path[0]] += 1.0;
}

/// Shared engine of [`reinforce_ms`] and [`reinforce_ms_c`]; `shift` is the
/// constant added to the baseline (0 for plain MS).
fn score_function_estimate(
    objective: &dyn Objective,
    table: &PotentialTable,
    opts: &EstimateOptions,
    stream: &mut GumbelNoiseStream,
    kind: EstimatorKind,
    shift: f64,
) -> Result<GradReport, EstimatorError> {
    check_dims(objective, table)?;
    let n = opts.n_samples;
    if n < 2 {
        return Err(EstimatorError::TooFewSamples {
            estimator: kind.name(),
            min: 2,
            got: n,
        });
    }
    let start = Instant::now();
    let (k, t_len) = (table.num_states(), table.seq_len());
    let dim = param_dim(k, t_len);

    // Expected sufficient statistics: one backward pass through log Z.
    let mut tape = Tape::new();
    let pots = leaf_potentials(&mut tape, table)?;
    let rec = record_forward(&mut tape, &pots)?;
    tape.backward(rec.log_z)?;
    let mu = flatten_grads(&tape, &pots);

    let trellis = forward(table);
    let mut paths = Vec::with_capacity(n);
    let mut rewards = Vec::with_capacity(n);
    for _ in 0..n {
        let noise = FfbsNoise::draw(stream, k, t_len);
        let path = ffbs_with_noise(table, &trellis, &noise)?;
        rewards.push(opts.reward_scale * objective.eval_hard(&path));
        paths.push(path);
    }
    let total: f64 = rewards.iter().sum();

    let mut acc = GradAccumulator::new(dim);
    let mut stats = vec![0.0; dim];
    let mut g = vec![0.0; dim];
    for (path, &f_i) in paths.iter().zip(&rewards) {
        let baseline = match opts.baseline {
            BaselineMode::LeaveOneOut => (total - f_i) / (n as f64 - 1.0),
            BaselineMode::AllSampleMean => total / n as f64,
        } + shift;
        let coeff = f_i - baseline;
        sufficient_stats_into(path, k, &mut stats);
        for ((gi, &si), &mi) in g.iter_mut().zip(&stats).zip(&mu) {
            *gi = coeff * (si - mi);
        }
        acc.push(&g, f_i);
    }
    GradReport::from_accumulator(kind.name().to_string(), &acc, start.elapsed().as_secs_f64())
}

/// Multi-sample score-function estimator with the leave-one-out mean-reward
/// baseline. Unbiased; needs `N >= 2`. Ignores `baseline_shift` — that is
/// [`reinforce_ms_c`]'s knob.
pub fn reinforce_ms(
    objective: &dyn Objective,
    table: &PotentialTable,
    opts: &EstimateOptions,
    stream: &mut GumbelNoiseStream,
) -> Result<GradReport, EstimatorError> {
    score_function_estimate(objective, table, opts, stream, EstimatorKind::ReinforceMs, 0.0)
}

/// [`reinforce_ms`] with the constant `opts.baseline_shift` added to every
/// baseline. Still unbiased (the shift multiplies a mean-zero score term);
/// with `baseline_shift = 0` it is sample-for-sample identical to
/// [`reinforce_ms`] under a shared stream.
pub fn reinforce_ms_c(
    objective: &dyn Objective,
    table: &PotentialTable,
    opts: &EstimateOptions,
    stream: &mut GumbelNoiseStream,
) -> Result<GradReport, EstimatorError> {
    score_function_estimate(
        objective,
        table,
        opts,
        stream,
        EstimatorKind::ReinforceMsC,
        opts.baseline_shift,
    )
}

/// Shared engine of the four pathwise estimators.
fn relaxed_estimate(
    objective: &dyn Objective,
    table: &PotentialTable,
    opts: &EstimateOptions,
    stream: &mut GumbelNoiseStream,
    kind: EstimatorKind,
) -> Result<GradReport, EstimatorError> {
    check_dims(objective, table)?;
    if !objective.accepts_soft() {
        return Err(EstimatorError::ObjectiveRejectsSoft);
    }
    if opts.n_samples < 1 {
        return Err(EstimatorError::TooFewSamples {
            estimator: kind.name(),
            min: 1,
            got: 0,
        });
    }
    let start = Instant::now();
    let (k, t_len) = (table.num_states(), table.seq_len());
    let straight_through =
        matches!(kind, EstimatorKind::GumbelCrfSt | EstimatorKind::PmMrfSt);
    let mut acc = GradAccumulator::new(param_dim(k, t_len));
    for _ in 0..opts.n_samples {
        let mut tape = Tape::new();
        let pots = leaf_potentials(&mut tape, table)?;
        let rel = match kind {
            EstimatorKind::GumbelCrf | EstimatorKind::GumbelCrfSt => {
                let trellis = record_forward(&mut tape, &pots)?;
                let noise = FfbsNoise::draw(stream, k, t_len);
                record_gumbelized_ffbs(&mut tape, &pots, &trellis, &noise, opts.tau)?
            }
            EstimatorKind::PmMrf | EstimatorKind::PmMrfSt => {
                let noise = PerturbNoise::draw(stream, k, t_len, opts.perturb_transitions);
                let shifted = perturb_on_tape(&mut tape, &pots, &noise)?;
                record_relaxed_viterbi(&mut tape, &shifted, opts.tau)?
            }
            _ => unreachable!("relaxed_estimate only handles pathwise kinds"),
        };
        let rows = if straight_through {
            let mut st_rows = Vec::with_capacity(t_len);
            for (&soft, &h) in rel.soft_rows.iter().zip(&rel.hard) {
                let mut onehot = vec![0.0; k];
                onehot[h] = 1.0;
                let hard_node = tape.vector(&onehot);
                st_rows.push(tape.straight_through(hard_node, soft)?);
            }
            st_rows
        } else {
            rel.soft_rows.clone()
        };
        let obj = objective.record_soft(&mut tape, &rows)?;
        let scaled = tape.scale(obj, opts.reward_scale)?;
        tape.backward(scaled)?;
        acc.push(&flatten_grads(&tape, &pots), tape.value_scalar(scaled));
    }
    GradReport::from_accumulator(kind.name().to_string(), &acc, start.elapsed().as_secs_f64())
}

/// Pathwise estimator through relaxed backward sampling: each sample
/// records the forward trellis and a Gumbelized backward pass, evaluates
/// the objective on the soft rows, and backprops to the table.
pub fn gumbel_crf(
    objective: &dyn Objective,
    table: &PotentialTable,
    opts: &EstimateOptions,
    stream: &mut GumbelNoiseStream,
) -> Result<GradReport, EstimatorError> {
    relaxed_estimate(objective, table, opts, stream, EstimatorKind::GumbelCrf)
}

/// Straight-through [`gumbel_crf`]: the objective sees exact one-hots of
/// the hard path (so its *value* is the plain FFBS estimate) while
/// gradients flow through the coupled soft rows.
pub fn gumbel_crf_st(
    objective: &dyn Objective,
    table: &PotentialTable,
    opts: &EstimateOptions,
    stream: &mut GumbelNoiseStream,
) -> Result<GradReport, EstimatorError> {
    relaxed_estimate(objective, table, opts, stream, EstimatorKind::GumbelCrfSt)
}

/// Pathwise estimator through relaxed Viterbi decoding of a perturbed
/// table. Inherits the structural bias of perturb-and-MAP sampling.
pub fn pm_mrf(
    objective: &dyn Objective,
    table: &PotentialTable,
    opts: &EstimateOptions,
    stream: &mut GumbelNoiseStream,
) -> Result<GradReport, EstimatorError> {
    relaxed_estimate(objective, table, opts, stream, EstimatorKind::PmMrf)
}

/// Straight-through [`pm_mrf`].
pub fn pm_mrf_st(
    objective: &dyn Objective,
    table: &PotentialTable,
    opts: &EstimateOptions,
    stream: &mut GumbelNoiseStream,
) -> Result<GradReport, EstimatorError> {
    relaxed_estimate(objective, table, opts, stream, EstimatorKind::PmMrfSt)
}

/// Uniform dispatch over [`EstimatorKind`], for harness code that treats
/// estimators as data. `Exact` reports the enumerated path count as its
/// sample count and an all-zero variance.
pub fn estimate(
    kind: EstimatorKind,
    objective: &dyn Objective,
    table: &PotentialTable,
    opts: &EstimateOptions,
    stream: &mut GumbelNoiseStream,
) -> Result<GradReport, EstimatorError> {
    match kind {
        EstimatorKind::Exact => {
            let start = Instant::now();
            let exact = exact_gradient(objective, table, opts.enumeration_cap)?;
            let grad: Vec<f64> = exact.grad.iter().map(|g| g * opts.reward_scale).collect();
            let dim = grad.len();
            Ok(GradReport {
                estimator: kind.name().to_string(),
                n_samples: exact.n_paths,
                param_dim: dim,
                mean_grad: grad,
                var_grad: vec![0.0; dim],
                log_variance_ratio: None,
                degenerate: Some("exact_enumeration".to_string()),
                mean_objective: opts.reward_scale * exact.expectation,
                seconds: start.elapsed().as_secs_f64(),
            })
        }
        EstimatorKind::ReinforceMs => reinforce_ms(objective, table, opts, stream),
        EstimatorKind::ReinforceMsC => reinforce_ms_c(objective, table, opts, stream),
        EstimatorKind::GumbelCrf | EstimatorKind::GumbelCrfSt
        | EstimatorKind::PmMrf | EstimatorKind::PmMrfSt => {
            relaxed_estimate(objective, table, opts, stream, kind)
        }
    }
}
