//! Minibatch ascent on the entropy-regularized ELBO.
//!
//! The loop is deliberately plain — shuffled minibatches, gradient clipping,
//! a fixed step size — because the object under study is the gradient
//! estimator, not the optimizer. What *is* engineered carefully is
//! reproducibility: every random draw comes from a `ChaCha` stream keyed by
//! `(seed, purpose, epoch)` — batch noise further by
//! `(update, position-in-batch)` — so nothing random carries across an epoch
//! boundary. Per-example gradients may be computed on worker threads, but
//! they are reduced in batch order, so a run is bit-reproducible regardless
//! of thread count, and a checkpoint at an epoch boundary resumes
//! bit-exactly.

use crate::checkpoint::Checkpoint;
use crate::diagnostics::collapse_diagnostics;
use crate::elbo::{elbo, ElboOptions};
use crate::error::VaeError;
use crate::nll::importance_nll;
use crate::params::{unit_f64, GenerativeParams, InferenceParams};
use crf_core::DEFAULT_ENUMERATION_CAP;
use estimators::{EstimatorKind, GradAccumulator, GradReport};
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;
use structured_sampling::{derived_seed, GumbelNoiseStream};

/// Every random draw in a run is keyed by `derived_seed(config.seed, index)`
/// with the index spaces below kept disjoint. Each purpose is re-keyed per
/// epoch (nothing random carries across an epoch boundary), which is what
/// makes a checkpoint at epoch `e` resumable bit-exactly.
const BATCH_STREAM_BASE: u64 = 1; // 1 + epoch
const NLL_STREAM_BASE: u64 = 1 << 40;
const VARIANCE_STREAM_BASE: u64 = 1 << 41;
const SHUFFLE_SEED_BASE: u64 = 1 << 42;
const DROPOUT_SEED_BASE: u64 = 1 << 43;

/// Any parameter beyond this magnitude is treated as divergence and aborts
/// the run. The point of the ceiling is to catch a blow-up at the update
/// that caused it: every intermediate in the model is at most trilinear in
/// the parameters (with tanh saturating the recurrence), so parameters under
/// 1e100 keep the whole forward pass finite, and the *gradient* of a run
/// heading off to infinity goes non-finite first — which the batch check
/// already handles. Letting parameters grow past this would eventually
/// overflow inside a forward pass instead, long after the step that broke
/// the run.
const PARAM_DIVERGENCE_CEILING: f64 = 1e100;

/// Temperature schedule `τ_e = max(floor, initial · decay^e)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TauSchedule {
    pub initial: f64,
    pub floor: f64,
    pub decay: f64,
}

impl Default for TauSchedule {
    fn default() -> Self {
        TauSchedule {
            initial: 1.0,
            floor: 0.25,
            decay: 0.8,
        }
    }
}

impl TauSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        (self.initial * self.decay.powi(epoch as i32)).max(self.floor)
    }

    fn validate(&self) -> Result<(), VaeError> {
        if !(self.floor > 0.0 && self.initial >= self.floor && self.initial.is_finite()) {
            return Err(VaeError::BadOptions(format!(
                "temperature schedule needs initial >= floor > 0, got initial {} floor {}",
                self.initial, self.floor
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(VaeError::BadOptions(format!(
                "temperature decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        Ok(())
    }
}

/// Word-dropout ratio decayed linearly from `initial` at epoch 0 to zero at
/// `zero_by_epoch` (and zero ever after). `zero_by_epoch == 0` disables
/// dropout outright.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WordDropoutSchedule {
    pub initial: f64,
    pub zero_by_epoch: usize,
}

impl Default for WordDropoutSchedule {
    fn default() -> Self {
        WordDropoutSchedule {
            initial: 0.3,
            zero_by_epoch: 5,
        }
    }
}

impl WordDropoutSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        if epoch >= self.zero_by_epoch {
            0.0
        } else {
            self.initial * (1.0 - epoch as f64 / self.zero_by_epoch as f64)
        }
    }

    fn validate(&self) -> Result<(), VaeError> {
        if !(0.0..=1.0).contains(&self.initial) {
            return Err(VaeError::BadOptions(format!(
                "word-dropout ratio must lie in [0, 1], got {}",
                self.initial
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub estimator: EstimatorKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Global L2 clip applied to the mean batch gradient. Must be finite
    /// (checkpoints are JSON, which cannot round-trip infinities); to
    /// effectively disable clipping set it far above any gradient norm.
    pub clip_norm: f64,
    /// Weight β on the posterior-entropy bonus in the objective.
    pub beta_entropy: f64,
    /// Monte-Carlo samples per example per gradient.
    pub n_samples: usize,
    /// Extra constant subtracted from the score-function baseline; only the
    /// shifted-baseline estimator reads it.
    pub baseline_shift: f64,
    pub tau: TauSchedule,
    pub word_dropout: WordDropoutSchedule,
    /// Perturb transition rows as well as emissions in the perturb-and-MAP
    /// estimators.
    pub perturb_transitions: bool,
    pub seed: u64,
    /// Prefix of the dataset used for epoch-end diagnostics.
    pub probe_examples: usize,
    /// Repeated gradient estimates on one probe example for the
    /// variance-ratio log; fewer than two disables the probe.
    pub probe_draws: usize,
    /// Importance-sampling draws per example for the NLL log.
    pub nll_samples: usize,
    /// Where to dump a checkpoint and trace if training hits a non-finite
    /// value; no snapshot is written when unset.
    pub snapshot_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            estimator: EstimatorKind::GumbelCrfSt,
            epochs: 10,
            batch_size: 16,
            learning_rate: 0.08,
            clip_norm: 10.0,
            beta_entropy: 1.0,
            n_samples: 1,
            baseline_shift: 0.0,
            tau: TauSchedule::default(),
            word_dropout: WordDropoutSchedule::default(),
            perturb_transitions: false,
            seed: 7,
            probe_examples: 16,
            probe_draws: 8,
            nll_samples: 32,
            snapshot_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), VaeError> {
        if self.batch_size == 0 {
            return Err(VaeError::BadOptions("batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(VaeError::BadOptions(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !self.clip_norm.is_finite() || self.clip_norm <= 0.0 {
            return Err(VaeError::BadOptions(format!(
                "clip norm must be finite and positive, got {}",
                self.clip_norm
            )));
        }
        if !(self.beta_entropy.is_finite() && self.beta_entropy >= 0.0) {
            return Err(VaeError::BadOptions(format!(
                "entropy weight must be finite and non-negative, got {}",
                self.beta_entropy
            )));
        }
        if !self.baseline_shift.is_finite() {
            return Err(VaeError::BadOptions("baseline shift must be finite".into()));
        }
        let needs = match self.estimator {
            EstimatorKind::ReinforceMs | EstimatorKind::ReinforceMsC => 2,
            EstimatorKind::Exact => 0,
            _ => 1,
        };
        if self.n_samples < needs {
            return Err(VaeError::TooFewSamples {
                estimator: self.estimator.name(),
                min: needs,
                got: self.n_samples,
            });
        }
        if self.nll_samples == 0 {
            return Err(VaeError::BadOptions(
                "NLL logging needs at least one importance draw".into(),
            ));
        }
        self.tau.validate()?;
        self.word_dropout.validate()
    }

    fn elbo_options(&self, epoch: usize) -> ElboOptions {
        ElboOptions {
            n_samples: self.n_samples,
            tau: self.tau.at(epoch),
            beta_entropy: self.beta_entropy,
            baseline_shift: self.baseline_shift,
            perturb_transitions: self.perturb_transitions,
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

/// One epoch of the training trace; all means are over the examples visited
/// that epoch except `nll_is` and the collapse scores, which come from the
/// probe prefix, and `variance_ratio`, which comes from repeated estimates
/// on the first probe example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elbo: f64,
    pub nll_is: f64,
    pub entropy: f64,
    pub variance_ratio: Option<f64>,
    pub grad_norm: f64,
    pub constant_posterior_score: f64,
    pub uniform_posterior_score: f64,
    pub tau: f64,
    pub word_dropout: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainingTrace {
    /// One JSON object per epoch, one epoch per line.
    pub fn to_jsonl(&self) -> Result<String, VaeError> {
        let mut out = String::new();
        for record in &self.epochs {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), VaeError> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }
}

fn shuffle(xs: &mut [usize], rng: &mut ChaCha12Rng) {
    for i in (1..xs.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        xs.swap(i, j);
    }
}

fn draw_mask(rng: &mut ChaCha12Rng, len: usize, ratio: f64) -> Option<Vec<bool>> {
    if ratio <= 0.0 {
        return None;
    }
    Some((0..len).map(|_| unit_f64(rng) < ratio).collect())
}

fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dump whatever we know to `snapshot_dir` (best effort) and build the
/// abort error. Always called with the last healthy parameters — a bad
/// gradient aborts before the step is applied, and a diverged step is rolled
/// back first — so the snapshot is a valid resume point just before the
/// blow-up.
fn nan_abort(
    theta: &GenerativeParams,
    phi: &InferenceParams,
    config: &TrainConfig,
    trace: &TrainingTrace,
    epoch: usize,
    update: usize,
) -> VaeError {
    let snapshot = config.snapshot_dir.as_ref().and_then(|dir| {
        std::fs::create_dir_all(dir).ok()?;
        let path = dir.join(format!("nan-abort-epoch{epoch}-update{update}.json"));
        Checkpoint::new(theta, phi, config, epoch).save(&path).ok()?;
        trace.write_jsonl(&dir.join("nan-abort-trace.jsonl")).ok();
        Some(path)
    });
    VaeError::NanAbort {
        epoch,
        update,
        snapshot,
    }
}

/// Run `config.epochs` of minibatch ascent in place and return the per-epoch
/// trace. Deterministic for a fixed config: the same seed gives bit-identical
/// parameters and trace statistics on any thread count.
pub fn train(
    theta: &mut GenerativeParams,
    phi: &mut InferenceParams,
    dataset: &[Vec<usize>],
    config: &TrainConfig,
) -> Result<TrainingTrace, VaeError> {
    train_epochs(theta, phi, dataset, config, 0)
}

/// Pick a checkpointed run back up at `checkpoint.next_epoch` and finish the
/// remaining epochs. Because every random draw is keyed by `(seed, epoch)`,
/// the continuation is bit-identical to the uninterrupted run; the returned
/// trace covers only the epochs executed here.
pub fn resume(
    checkpoint: &Checkpoint,
    dataset: &[Vec<usize>],
) -> Result<(GenerativeParams, InferenceParams, TrainingTrace), VaeError> {
    let mut theta = checkpoint.theta.clone();
    let mut phi = checkpoint.phi.clone();
    let trace = train_epochs(
        &mut theta,
        &mut phi,
        dataset,
        &checkpoint.config,
        checkpoint.next_epoch,
    )?;
    Ok((theta, phi, trace))
}

fn train_epochs(
    theta: &mut GenerativeParams,
    phi: &mut InferenceParams,
    dataset: &[Vec<usize>],
    config: &TrainConfig,
    start_epoch: usize,
) -> Result<TrainingTrace, VaeError> {
    config.validate()?;
    theta.validate()?;
    phi.validate()?;
    if theta.num_states() != phi.num_states() || theta.num_words() != phi.num_words() {
        return Err(VaeError::BadParams(
            "decoder and encoder disagree on vocabulary or state count".into(),
        ));
    }
    if dataset.len() < 2 {
        return Err(VaeError::BadInput(
            "training needs at least two examples (collapse diagnostics compare across examples)"
                .into(),
        ));
    }
    let vocab = theta.num_words();
    for (i, x) in dataset.iter().enumerate() {
        if x.is_empty() {
            return Err(VaeError::BadInput(format!("example {i} is empty")));
        }
        if let Some(&w) = x.iter().find(|&&w| w >= vocab) {
            return Err(VaeError::BadInput(format!(
                "example {i} contains word id {w} outside vocabulary of size {vocab}"
            )));
        }
    }

    let theta_dim = theta.dim();
    let dim = theta_dim + phi.dim();
    let master = GumbelNoiseStream::seeded(config.seed);
    let mut trace = TrainingTrace::default();

    for epoch in start_epoch..config.epochs {
        let started = Instant::now();
        let opts = config.elbo_options(epoch);
        let dropout_ratio = config.word_dropout.at(epoch);
        let epoch_stream = master.fork(BATCH_STREAM_BASE + epoch as u64);
        let mut shuffle_rng = ChaCha12Rng::seed_from_u64(derived_seed(
            config.seed,
            SHUFFLE_SEED_BASE + epoch as u64,
        ));
        let mut dropout_rng = ChaCha12Rng::seed_from_u64(derived_seed(
            config.seed,
            DROPOUT_SEED_BASE + epoch as u64,
        ));

        let mut order: Vec<usize> = (0..dataset.len()).collect();
        shuffle(&mut order, &mut shuffle_rng);

        let mut elbo_sum = 0.0;
        let mut entropy_sum = 0.0;
        let mut seen = 0usize;
        let mut grad_norm_sum = 0.0;
        let mut updates = 0usize;

        for (update, batch) in order.chunks(config.batch_size).enumerate() {
            let update_stream = epoch_stream.fork(update as u64);
            // Masks are drawn serially so the worker threads never touch the
            // dropout RNG.
            let masks: Vec<Option<Vec<bool>>> = batch
                .iter()
                .map(|&i| draw_mask(&mut dropout_rng, dataset[i].len(), dropout_ratio))
                .collect();

            let theta_now: &GenerativeParams = theta;
            let phi_now: &InferenceParams = phi;
            let estimates = batch
                .par_iter()
                .zip(masks.par_iter())
                .enumerate()
                .map(|(pos, (&i, mask))| {
                    let mut stream = update_stream.fork(pos as u64);
                    elbo(
                        theta_now,
                        phi_now,
                        &dataset[i],
                        config.estimator,
                        &opts,
                        &mut stream,
                        mask.as_deref(),
                    )
                })
                .collect::<Result<Vec<_>, VaeError>>()?;

            // Reduce in batch order — addition order is fixed, so the result
            // does not depend on how rayon scheduled the work above.
            let mut grad = vec![0.0; dim];
            let mut finite = true;
            for estimate in &estimates {
                finite &= estimate.value.is_finite();
                for (g, gi) in grad.iter_mut().zip(&estimate.report.mean_grad) {
                    *g += gi;
                }
                elbo_sum += estimate.value;
                entropy_sum += estimate.entropy;
            }
            seen += estimates.len();
            let inv = 1.0 / estimates.len() as f64;
            for g in &mut grad {
                *g *= inv;
                finite &= g.is_finite();
            }
            if !finite {
                return Err(nan_abort(theta, phi, config, &trace, epoch, update));
            }

            let norm = l2(&grad);
            grad_norm_sum += norm;
            updates += 1;
            let clip = if norm > config.clip_norm {
                config.clip_norm / norm
            } else {
                1.0
            };
            let step = config.learning_rate * clip;
            if step != 0.0 {
                let healthy = (theta.to_flat(), phi.to_flat());
                theta.axpy(step, &grad[..theta_dim]);
                phi.axpy(step, &grad[theta_dim..]);
                let diverged = |p: &f64| !p.is_finite() || p.abs() > PARAM_DIVERGENCE_CEILING;
                if theta.to_flat().iter().any(diverged) || phi.to_flat().iter().any(diverged) {
                    // Roll the step back so the snapshot (and the parameters
                    // the caller is left holding) are the last healthy state,
                    // one step before the blow-up.
                    theta.set_from_flat(&healthy.0);
                    phi.set_from_flat(&healthy.1);
                    return Err(nan_abort(theta, phi, config, &trace, epoch, update));
                }
            }
        }

        // Epoch-end diagnostics on the probe prefix, with dedicated noise
        // streams so they never perturb the training draws.
        let probe = &dataset[..config.probe_examples.clamp(2, dataset.len())];
        let collapse = collapse_diagnostics(phi, probe)?;
        let mut nll_stream = master.fork(NLL_STREAM_BASE + epoch as u64);
        let mut nll_sum = 0.0;
        for x in probe {
            nll_sum += importance_nll(theta, phi, x, config.nll_samples, &mut nll_stream)?;
        }

        let variance_ratio = if config.probe_draws >= 2 {
            let probe_stream = master.fork(VARIANCE_STREAM_BASE + epoch as u64);
            let mut acc = GradAccumulator::new(dim);
            for draw in 0..config.probe_draws {
                let mut stream = probe_stream.fork(draw as u64);
                let estimate = elbo(
                    theta,
                    phi,
                    &dataset[0],
                    config.estimator,
                    &opts,
                    &mut stream,
                    None,
                )?;
                acc.push(&estimate.report.mean_grad, estimate.value);
            }
            GradReport::from_accumulator(config.estimator.name().to_string(), &acc, 0.0)?
                .log_variance_ratio
        } else {
            None
        };

        trace.epochs.push(EpochRecord {
            epoch,
            elbo: elbo_sum / seen as f64,
            nll_is: nll_sum / probe.len() as f64,
            entropy: entropy_sum / seen as f64,
            variance_ratio,
            grad_norm: grad_norm_sum / updates as f64,
            constant_posterior_score: collapse.constant_posterior_score,
            uniform_posterior_score: collapse.uniform_posterior_score,
            tau: opts.tau,
            word_dropout: dropout_ratio,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    Ok(trace)
}
