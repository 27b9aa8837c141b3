//! The oracle suite behind `crfkit check`.
//!
//! Every check in here compares a fast component against something slower
//! but unarguable: brute-force enumeration, finite differences, or a pinned
//! regression bound with its calibration provenance recorded next to it.
//! The check functions are public and take their budgets as parameters so
//! that the CLI (everyday budgets) and the acceptance tests (full budgets)
//! exercise the same code path instead of two drifting copies.
//!
//! Layout of a run: [`run_checks`] walks the selected golden instances and
//! pushes one [`CheckRecord`] per check per instance, then a handful of
//! instance-independent records (gradient-primitive probes, the
//! variance-ordering sweep, a wall-clock budget). A record never panics out
//! of the run: check bodies return `Result`, and errors become failed
//! records so one broken instance cannot hide the state of the others.

use crate::config::ExperimentConfig;
use crate::error::HarnessError;
use crate::registry::{registry, GoldenInstance, ADVERSARIAL_INSTANCE};
use crf_core::{
    backward, entropy, enumerate_posterior, forward, marginals, viterbi, PotentialTable,
};
use estimators::record::{
    flatten_grads, leaf_potentials, param_dim, perturb_on_tape, record_forward,
    record_gumbelized_ffbs, record_relaxed_viterbi, table_from_flat, table_to_flat,
};
use estimators::{
    estimate, exact_gradient, max_z_score, AdjacentPairObjective, EstimateOptions, EstimatorKind,
    LinearObjective, Objective,
};
use grad_engine::check::{finite_diff, max_rel_err};
use grad_engine::{GradError, NodeId, Tape};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;
use structured_sampling::{
    ffbs, ffbs_with_noise, gumbelized_ffbs, gumbelized_ffbs_with_noise, perturb_and_map,
    FfbsNoise, GumbelNoiseStream, PathCounts, PerturbNoise, PerturbOptions,
};

/// Absolute tolerance for `log Z` agreement between the trellis recursions
/// and full enumeration.
pub const LOG_Z_TOL: f64 = 1e-10;
/// Absolute tolerance for posterior marginals against enumeration.
pub const MARGINAL_TOL: f64 = 1e-10;
/// Absolute tolerance for posterior entropy against enumeration. Looser than
/// the marginals: entropy sums `T * K^2` products of logs, each of which can
/// amplify the last bit of a marginal.
pub const ENTROPY_TOL: f64 = 1e-8;
/// Exact samplers must track the enumerated posterior this closely in total
/// variation at the full adversarial budget. Biased ones must not.
pub const FFBS_TV_CEILING: f64 = 0.02;
/// Relative tolerance for frozen-noise relaxed gradients against central
/// finite differences of the same loss.
pub const PATHWISE_FD_TOL: f64 = 1e-4;
/// Relative tolerance for individual tape primitives against central finite
/// differences.
pub const PRIMITIVE_FD_TOL: f64 = 1e-6;
/// A relaxed row counts as "sharp" when its mass sits within this of a
/// one-hot vector (in max norm).
pub const SHARP_ROW_GAP: f64 = 1e-3;
/// Fraction of relaxed rows that must be sharp at the coldest grid
/// temperature on the instances in [`SHARP_INSTANCES`].
pub const SHARP_FRACTION: f64 = 0.99;
/// Fraction of sweep points at which the relaxed estimators must beat the
/// score-function ones on variance-to-signal ratio.
pub const VARIANCE_ORDERING_FRACTION: f64 = 0.8;
/// Draw count for the per-instance total-variation regression; the stored
/// bound in each [`GoldenInstance`] was calibrated at exactly this budget.
pub const TV_REGRESSION_DRAWS: usize = 10_000;
/// Temperature for the frozen-noise finite-difference probes. Warm enough
/// that perturbing one coordinate by the FD step cannot flip an argmax
/// (which would put a kink inside the central difference), cold enough that
/// the softmaxes are doing real work.
pub const FD_TAU: f64 = 0.7;
/// Central-difference step for the pathwise probes.
pub const FD_STEP: f64 = 1e-5;
/// Frozen noise draws per instance and estimator in the pathwise probe.
pub const FD_DRAWS: usize = 2;

/// Instances whose relaxed rows are expected to be nearly one-hot at the
/// coldest grid temperature.
///
/// The sharpness claim cannot hold on every table: a relaxed row stays
/// `eps`-mixed whenever the top two perturbed log-weights land within about
/// `tau * ln(K/eps)` of each other, and for near-tied weights that happens
/// with probability proportional to the tie density, independent of how the
/// row was sampled. On flat tables the rate is 3-5% per row, so demanding
/// 99% there would reject a correct sampler. The check is therefore pinned
/// to well-separated tables where the near-tie mass is negligible; the
/// recalibration test prints the observed mixed-row rate per instance so the
/// pin stays honest.
pub const SHARP_INSTANCES: &[&str] = &[ADVERSARIAL_INSTANCE];

/// Instances the frozen-noise finite-difference probe runs on: smallest to
/// largest state count, plus one soft-blocked table to keep extreme (but
/// finite) potentials in the FD diet.
pub const FD_INSTANCES: &[&str] = &[
    "k2_t2_mixed",
    "k3_t3_sticky",
    "k3_t4_blocked_emission",
    "k4_t4_mixed",
];

/// Instances in the variance-ordering sweep. A spread of shapes: sticky and
/// flat chains where score-function estimators struggle most and least, the
/// adversarial table, and the largest mixed instances.
pub const VARIANCE_INSTANCES: &[&str] = &[
    "k2_t3_sticky",
    "k2_t6_peaked",
    "k3_t3_flat",
    "k3_t4_mixed",
    "k3_t5_sticky_adversarial",
    "k4_t4_mixed",
];
/// Seeds in the variance-ordering sweep.
pub const VARIANCE_SEEDS: &[u64] = &[1, 2, 3];
/// Sample budgets in the variance-ordering sweep.
pub const VARIANCE_BUDGETS: &[usize] = &[32, 128];
/// Temperatures in the variance-ordering sweep.
pub const VARIANCE_TAUS: &[f64] = &[1.0, 0.5];

// Disjoint fork namespaces, one per check, so adding draws to one check
// never shifts the noise any other check sees. Each check forks the master
// stream at `BASE + instance_index`.
const GOF_STREAM: u64 = 1 << 8;
const COUPLING_STREAM: u64 = 2 << 8;
const TAU_STREAM: u64 = 3 << 8;
const SHARP_STREAM: u64 = 4 << 8;
const TV_STREAM: u64 = 5 << 8;
const PM_STREAM: u64 = 6 << 8;
const UNBIASED_STREAM: u64 = 7 << 8;
const FD_STREAM: u64 = 8 << 8;
const VARIANCE_STREAM: u64 = 9 << 8;

/// Outcome of one check on one instance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckRecord {
    /// Which check ran, e.g. `"dp_exactness"`.
    pub check: String,
    /// Which golden instance it ran on, `"-"` for instance-independent checks.
    pub instance: String,
    pub passed: bool,
    /// Human-readable evidence: the measured quantities and the bound they
    /// were held to.
    pub detail: String,
    pub seconds: f64,
}

/// Every record from one `crfkit check` run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub records: Vec<CheckRecord>,
}

impl CheckOutcome {
    pub fn failures(&self) -> Vec<&CheckRecord> {
        self.records.iter().filter(|r| !r.passed).collect()
    }

    pub fn all_passed(&self) -> bool {
        self.records.iter().all(|r| r.passed)
    }

    /// One JSON object per line, in run order.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), HarnessError> {
        let mut buf = Vec::new();
        for record in &self.records {
            serde_json::to_writer(&mut buf, record)?;
            buf.push(b'\n');
        }
        let mut file =
            std::fs::File::create(path).map_err(|e| HarnessError::io(path.to_path_buf(), e))?;
        file.write_all(&buf)
            .map_err(|e| HarnessError::io(path.to_path_buf(), e))?;
        Ok(())
    }
}

/// Runs one check body, timing it and turning an `Err` into a failed record
/// rather than aborting the whole run.
fn run_one(
    check: &str,
    instance: &str,
    body: impl FnOnce() -> Result<(bool, String), HarnessError>,
) -> CheckRecord {
    let start = Instant::now();
    let (passed, detail) = match body() {
        Ok(pair) => pair,
        Err(e) => (false, format!("error: {e}")),
    };
    CheckRecord {
        check: check.to_string(),
        instance: instance.to_string(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// The test objective the gradient checks differentiate: a seeded linear
/// term plus a seeded adjacent-pair term.
///
/// Both parts matter. A purely linear objective only probes the per-position
/// marginals of a relaxed sample; the pair term is sensitive to the joint
/// over neighbouring positions, which is exactly where a relaxation that
/// looks right marginally can still be biased.
pub struct BenchObjective {
    linear: LinearObjective,
    pair: AdjacentPairObjective,
}

impl BenchObjective {
    /// Deterministic objective for a golden instance, decorrelated from the
    /// instance's own potential draws.
    pub fn for_instance(g: &GoldenInstance) -> Self {
        Self::seeded(g.spec.num_states, g.spec.seq_len, g.spec.seed ^ 0x0B0B)
    }

    pub fn seeded(num_states: usize, seq_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut unit = move || (rng.next_u64() >> 11) as f64 * 2_f64.powi(-53);
        let weights =
            Array2::from_shape_fn((seq_len, num_states), |_| 2.0 * unit() - 1.0);
        let pair = Array2::from_shape_fn((num_states, num_states), |_| 2.0 * unit() - 1.0);
        BenchObjective {
            linear: LinearObjective::new(weights),
            pair: AdjacentPairObjective::new(pair),
        }
    }
}

impl Objective for BenchObjective {
    fn num_states(&self) -> usize {
        self.linear.num_states()
    }

    fn eval_hard(&self, path: &[usize]) -> f64 {
        self.linear.eval_hard(path) + self.pair.eval_hard(path)
    }

    fn record_soft(&self, tape: &mut Tape, rows: &[NodeId]) -> Result<NodeId, GradError> {
        let a = self.linear.record_soft(tape, rows)?;
        let b = self.pair.record_soft(tape, rows)?;
        Ok(tape.add(a, b))
    }
}

/// Stored oracle digest still matches what the instance generates.
pub fn check_digest(g: &GoldenInstance) -> Result<(bool, String), HarnessError> {
    let artifacts = g.artifacts()?;
    let passed = artifacts.digest == g.digest;
    Ok((
        passed,
        format!(
            "stored {:#018x}, regenerated {:#018x}",
            g.digest, artifacts.digest
        ),
    ))
}

/// Trellis quantities against full enumeration: `log Z` from both the
/// forward and backward recursions, all posterior marginals, entropy, and
/// the exact argmax path.
pub fn check_dp_exactness(g: &GoldenInstance) -> Result<(bool, String), HarnessError> {
    let table = g.table()?;
    let post = enumerate_posterior(&table, crf_core::DEFAULT_ENUMERATION_CAP)?;

    let fwd = forward(&table);
    let bwd = backward(&table);
    let log_z_err = (fwd.log_z - post.log_z())
        .abs()
        .max((bwd.log_z - post.log_z()).abs());

    let dp_marginals = marginals(&table)?;
    let enum_marginals = post.marginals();
    let marginal_err = dp_marginals
        .iter()
        .zip(enum_marginals.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0_f64, f64::max);

    let entropy_err = (entropy(&table)? - post.entropy()).abs();
    let map = viterbi(&table)?;
    let map_matches = map == *post.map_path();

    let passed = log_z_err <= LOG_Z_TOL
        && marginal_err <= MARGINAL_TOL
        && entropy_err <= ENTROPY_TOL
        && map_matches;
    Ok((
        passed,
        format!(
            "log_z err {log_z_err:.2e} (tol {LOG_Z_TOL:.0e}), marginal err {marginal_err:.2e} \
             (tol {MARGINAL_TOL:.0e}), entropy err {entropy_err:.2e} (tol {ENTROPY_TOL:.0e}), \
             map match {map_matches}"
        ),
    ))
}

/// Both exact samplers pass a chi-square goodness-of-fit test against the
/// enumerated posterior: plain forward-filter backward-sample draws, and the
/// hard component of the relaxed draws (whose distribution must not depend
/// on the temperature).
pub fn check_sampler_gof(
    g: &GoldenInstance,
    stream: &mut GumbelNoiseStream,
    samples: usize,
    alpha: f64,
) -> Result<(bool, String), HarnessError> {
    let table = g.table()?;
    let post = enumerate_posterior(&table, crf_core::DEFAULT_ENUMERATION_CAP)?;
    let trellis = forward(&table);

    if post.paths().len() == 1 {
        // Single admissible path: chi-square has no degrees of freedom, so
        // the check degenerates to "every draw is that path".
        let only = post.map_path().clone();
        let mut plain = stream.fork(0);
        let mut relaxed = stream.fork(1);
        for _ in 0..samples.min(256) {
            if ffbs(&table, &trellis, &mut plain)? != only {
                return Ok((false, "ffbs left the only admissible path".into()));
            }
            if gumbelized_ffbs(&table, &trellis, 0.5, &mut relaxed)?.hard != only {
                return Ok((false, "relaxed draw left the only admissible path".into()));
            }
        }
        return Ok((true, "single admissible path, all draws matched".into()));
    }

    let mut plain_stream = stream.fork(0);
    let mut plain = PathCounts::new();
    for _ in 0..samples {
        plain.add(ffbs(&table, &trellis, &mut plain_stream)?);
    }
    let plain_test = plain.gof_against(&post, alpha)?;

    let mut relaxed_stream = stream.fork(1);
    let mut relaxed = PathCounts::new();
    for _ in 0..samples {
        relaxed.add(gumbelized_ffbs(&table, &trellis, 0.5, &mut relaxed_stream)?.hard);
    }
    let relaxed_test = relaxed.gof_against(&post, alpha)?;

    let passed = plain_test.passed && relaxed_test.passed;
    Ok((
        passed,
        format!(
            "ffbs chi2 {:.2} vs {:.2} ({} cells), relaxed chi2 {:.2} vs {:.2} ({} cells), \
             alpha {alpha}, {samples} draws",
            plain_test.statistic,
            plain_test.threshold,
            plain_test.pooled_cells,
            relaxed_test.statistic,
            relaxed_test.threshold,
            relaxed_test.pooled_cells
        ),
    ))
}

/// The relaxed sampler's couplings: under shared noise its hard path equals
/// the plain sampler's draw at every temperature, each relaxed row argmaxes
/// at the hard state, and re-seeding reproduces the identical hard
/// sequences.
pub fn check_coupling(
    g: &GoldenInstance,
    stream: &mut GumbelNoiseStream,
    draws: usize,
) -> Result<(bool, String), HarnessError> {
    let table = g.table()?;
    let trellis = forward(&table);
    let num_states = table.num_states();

    let mut noise_stream = stream.fork(0);
    for d in 0..draws {
        let noise = FfbsNoise::draw(&mut noise_stream, num_states, table.seq_len());
        let hard = ffbs_with_noise(&table, &trellis, &noise)?;
        for &tau in &[1.0, 0.01] {
            let relaxed = gumbelized_ffbs_with_noise(&table, &trellis, tau, &noise)?;
            if relaxed.hard != hard {
                return Ok((
                    false,
                    format!("draw {d}: hard path diverged from shared-noise ffbs at tau {tau}"),
                ));
            }
            for (t, &state) in relaxed.hard.iter().enumerate() {
                let row = relaxed.soft.row(t);
                let argmax = crf_core::logspace::argmax(row.as_slice().expect("row layout"))
                    .expect("non-empty row");
                if argmax != state {
                    return Ok((
                        false,
                        format!("draw {d}: soft row {t} argmax {argmax} != hard state {state}"),
                    ));
                }
            }
        }
    }

    // Replay: two fresh streams with the same seed must yield identical hard
    // sequences from the plain and relaxed samplers, draw after draw.
    let shared_seed = stream.fork(1).seed();
    let mut a = GumbelNoiseStream::seeded(shared_seed);
    let mut b = GumbelNoiseStream::seeded(shared_seed);
    for d in 0..draws {
        let plain = ffbs(&table, &trellis, &mut a)?;
        let relaxed = gumbelized_ffbs(&table, &trellis, 0.5, &mut b)?;
        if plain != relaxed.hard {
            return Ok((
                false,
                format!("replay draw {d}: same-seeded ffbs and relaxed hard paths diverged"),
            ));
        }
    }

    Ok((
        true,
        format!("{draws} shared-noise draws coupled at tau 1.0 and 0.01, replay identical"),
    ))
}

/// Under shared noise, cooling the temperature along the grid never moves a
/// relaxed sample further from its hard one-hot form: the max-norm gap is
/// monotone non-increasing per draw, not just on average.
pub fn check_tau_limit(
    g: &GoldenInstance,
    stream: &mut GumbelNoiseStream,
    grid: &[f64],
    draws: usize,
) -> Result<(bool, String), HarnessError> {
    let table = g.table()?;
    let trellis = forward(&table);
    let mut noise_stream = stream.fork(0);
    let mut mean_gaps = vec![0.0_f64; grid.len()];

    for d in 0..draws {
        let noise = FfbsNoise::draw(&mut noise_stream, table.num_states(), table.seq_len());
        let mut prev = f64::INFINITY;
        for (i, &tau) in grid.iter().enumerate() {
            let relaxed = gumbelized_ffbs_with_noise(&table, &trellis, tau, &noise)?;
            let gap = relaxed.max_gap();
            // Slack of a few ulps: the gap at successive temperatures is
            // computed through different softmax scalings.
            if gap > prev + 1e-12 {
                return Ok((
                    false,
                    format!(
                        "draw {d}: gap rose from {prev:.3e} to {gap:.3e} when tau fell to {tau}"
                    ),
                ));
            }
            prev = gap;
            mean_gaps[i] += gap / draws as f64;
        }
    }

    let mut detail = format!("{draws} draws, mean gap per tau:");
    for (tau, gap) in grid.iter().zip(&mean_gaps) {
        let _ = write!(detail, " {tau}->{gap:.3e}");
    }
    Ok((true, detail))
}

/// At the coldest grid temperature, almost every relaxed categorical row
/// collapses onto its hard state. A "row" is one per-position draw of the
/// backward pass; see [`SHARP_INSTANCES`] for why this is pinned to
/// well-separated tables.
pub fn check_tau_sharpness(
    g: &GoldenInstance,
    stream: &mut GumbelNoiseStream,
    tau: f64,
    draws: usize,
) -> Result<(bool, String), HarnessError> {
    let table = g.table()?;
    let trellis = forward(&table);
    let mut noise_stream = stream.fork(0);
    let mut sharp = 0_usize;
    let mut total = 0_usize;

    for _ in 0..draws {
        let relaxed = gumbelized_ffbs(&table, &trellis, tau, &mut noise_stream)?;
        for (t, &state) in relaxed.hard.iter().enumerate() {
            total += 1;
            if 1.0 - relaxed.soft[[t, state]] < SHARP_ROW_GAP {
                sharp += 1;
            }
        }
    }

    let fraction = sharp as f64 / total as f64;
    Ok((
        fraction >= SHARP_FRACTION,
        format!(
            "{sharp}/{total} rows within {SHARP_ROW_GAP:.0e} of one-hot at tau {tau} \
             (need {SHARP_FRACTION})"
        ),
    ))
}

/// Empirical total variation of the plain sampler against its stored,
/// pilot-calibrated bound at the calibration budget. This is the drift
/// alarm: it cannot prove the sampler exact (the goodness-of-fit check does
/// the distribution-level work) but it is cheap and has a pinned history.
pub fn check_tv_regression(
    g: &GoldenInstance,
    stream: &mut GumbelNoiseStream,
    bound_override: Option<f64>,
) -> Result<(bool, String), HarnessError> {
    let table = g.table()?;
    let post = enumerate_posterior(&table, crf_core::DEFAULT_ENUMERATION_CAP)?;
    let trellis = forward(&table);
    let bound = bound_override.unwrap_or(g.bounds.ffbs_tv_10k);

    let mut sampler = stream.fork(0);
    let mut counts = PathCounts::new();
    for _ in 0..TV_REGRESSION_DRAWS {
        counts.add(ffbs(&table, &trellis, &mut sampler)?);
    }
    let tv = counts.empirical_tv(&post)?;
    Ok((
        tv <= bound,
        format!(
            "tv {tv:.4} vs bound {bound:.4} at {TV_REGRESSION_DRAWS} draws \
             (calibrated seed {}, {})",
            g.bounds.pilot_seed, g.bounds.pilot_date
        ),
    ))
}

/// On a table built to punish it, perturb-and-MAP stays measurably biased
/// while the exact sampler converges: PM's total variation must stay above
/// a pilot-calibrated floor at the same budget where the plain sampler's
/// falls under [`FFBS_TV_CEILING`].
pub fn check_pm_bias(
    g: &GoldenInstance,
    stream: &mut GumbelNoiseStream,
    floor: f64,
    draws: usize,
) -> Result<(bool, String), HarnessError> {
    let table = g.table()?;
    let post = enumerate_posterior(&table, crf_core::DEFAULT_ENUMERATION_CAP)?;
    let trellis = forward(&table);

    let mut pm_stream = stream.fork(0);
    let mut pm_counts = PathCounts::new();
    for _ in 0..draws {
        pm_counts.add(perturb_and_map(
            &table,
            &mut pm_stream,
            PerturbOptions::default(),
        )?);
    }
    let pm_tv = pm_counts.empirical_tv(&post)?;

    let mut ffbs_stream = stream.fork(1);
    let mut ffbs_counts = PathCounts::new();
    for _ in 0..draws {
        ffbs_counts.add(ffbs(&table, &trellis, &mut ffbs_stream)?);
    }
    let ffbs_tv = ffbs_counts.empirical_tv(&post)?;

    let passed = pm_tv >= floor && ffbs_tv < FFBS_TV_CEILING;
    Ok((
        passed,
        format!(
            "pm tv {pm_tv:.4} (floor {floor:.4}), ffbs tv {ffbs_tv:.4} \
             (ceiling {FFBS_TV_CEILING}) at {draws} draws"
        ),
    ))
}

/// Both score-function estimators agree with the enumerated gradient to
/// within `z_limit` standard errors on every coordinate, splitting `budget`
/// samples evenly between them.
pub fn check_score_function_unbiased(
    g: &GoldenInstance,
    stream: &mut GumbelNoiseStream,
    budget: usize,
    z_limit: f64,
) -> Result<(bool, String), HarnessError> {
    let table = g.table()?;
    let objective = BenchObjective::for_instance(g);
    let exact = exact_gradient(&objective, &table, crf_core::DEFAULT_ENUMERATION_CAP)?;

    let n = (budget / 2).max(2);
    let mut worst = 0.0_f64;
    let mut detail = String::new();
    for (idx, (kind, shift)) in [
        (EstimatorKind::ReinforceMs, 0.0),
        (EstimatorKind::ReinforceMsC, 0.5),
    ]
    .into_iter()
    .enumerate()
    {
        let opts = EstimateOptions {
            n_samples: n,
            baseline_shift: shift,
            ..EstimateOptions::default()
        };
        let mut estimator_stream = stream.fork(idx as u64);
        let report = estimate(kind, &objective, &table, &opts, &mut estimator_stream)?;
        let z = max_z_score(&report, &exact.grad)
            .ok_or_else(|| HarnessError::Config("estimator returned no variance".into()))?;
        worst = worst.max(z);
        let _ = write!(detail, "{} z {:.2}; ", kind.name(), z);
    }
    let _ = write!(detail, "limit {z_limit}, {n} samples each");
    Ok((worst <= z_limit, detail))
}

/// Differentiates one frozen-noise relaxed draw on the tape and returns the
/// loss value plus the flattened gradient with respect to the table.
fn gumbel_loss(
    table: &PotentialTable,
    objective: &BenchObjective,
    noise: &FfbsNoise,
    tau: f64,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let pots = leaf_potentials(&mut tape, table).expect("finite golden table");
    let trellis = record_forward(&mut tape, &pots).expect("forward recording");
    let relaxed = record_gumbelized_ffbs(&mut tape, &pots, &trellis, noise, tau)
        .expect("relaxed recording");
    let loss = objective
        .record_soft(&mut tape, &relaxed.soft_rows)
        .expect("objective recording");
    tape.backward(loss).expect("backward");
    (tape.value_scalar(loss), flatten_grads(&tape, &pots))
}

/// Same, for the perturb-and-MAP relaxation: perturb the table on the tape,
/// run relaxed Viterbi, and differentiate back to the unperturbed leaves.
fn pm_loss(
    table: &PotentialTable,
    objective: &BenchObjective,
    noise: &PerturbNoise,
    tau: f64,
) -> (f64, Vec<f64>) {
    let mut tape = Tape::new();
    let pots = leaf_potentials(&mut tape, table).expect("finite golden table");
    let perturbed = perturb_on_tape(&mut tape, &pots, noise).expect("perturbation recording");
    let relaxed =
        record_relaxed_viterbi(&mut tape, &perturbed, tau).expect("relaxed viterbi recording");
    let loss = objective
        .record_soft(&mut tape, &relaxed.soft_rows)
        .expect("objective recording");
    tape.backward(loss).expect("backward");
    (tape.value_scalar(loss), flatten_grads(&tape, &pots))
}

/// With the noise frozen, the relaxed losses are plain deterministic
/// functions of the table, and their tape gradients must match central
/// finite differences.
///
/// Both losses have kinks where a perturbed argmax changes winner; at a kink
/// the relative error is O(1), not slightly above tolerance, so the pinned
/// noise draws only need to avoid a measure-zero set. The recalibration test
/// prints the observed errors to confirm the pinned draws sit far from any
/// crossing.
pub fn check_pathwise_fd(
    g: &GoldenInstance,
    stream: &mut GumbelNoiseStream,
) -> Result<(bool, String), HarnessError> {
    let table = g.table()?;
    let objective = BenchObjective::for_instance(g);
    let k = table.num_states();
    let t = table.seq_len();
    let x0 = table_to_flat(&table);

    let mut worst_gumbel = 0.0_f64;
    let mut worst_pm = 0.0_f64;
    for draw in 0..FD_DRAWS {
        let mut gumbel_stream = stream.fork(draw as u64);
        let ffbs_noise = FfbsNoise::draw(&mut gumbel_stream, k, t);
        let (_, tape_grad) = gumbel_loss(&table, &objective, &ffbs_noise, FD_TAU);
        let fd_grad = finite_diff(
            &mut |xs: &[f64]| {
                let candidate = table_from_flat(xs, k, t).expect("perturbed table stays valid");
                gumbel_loss(&candidate, &objective, &ffbs_noise, FD_TAU).0
            },
            &x0,
            FD_STEP,
        );
        worst_gumbel = worst_gumbel.max(max_rel_err(&tape_grad, &fd_grad));

        let mut pm_stream = stream.fork(1000 + draw as u64);
        let pm_noise = PerturbNoise::draw(&mut pm_stream, k, t, false);
        let (_, tape_grad) = pm_loss(&table, &objective, &pm_noise, FD_TAU);
        let fd_grad = finite_diff(
            &mut |xs: &[f64]| {
                let candidate = table_from_flat(xs, k, t).expect("perturbed table stays valid");
                pm_loss(&candidate, &objective, &pm_noise, FD_TAU).0
            },
            &x0,
            FD_STEP,
        );
        worst_pm = worst_pm.max(max_rel_err(&tape_grad, &fd_grad));
    }

    let passed = worst_gumbel < PATHWISE_FD_TOL && worst_pm < PATHWISE_FD_TOL;
    Ok((
        passed,
        format!(
            "gumbel rel err {worst_gumbel:.2e}, pm rel err {worst_pm:.2e} \
             (tol {PATHWISE_FD_TOL:.0e}, {FD_DRAWS} frozen draws each, tau {FD_TAU})"
        ),
    ))
}

type Builder = fn(&mut Tape, &[f64]) -> Result<(NodeId, Vec<NodeId>), GradError>;

fn leaf(tape: &mut Tape, shape: &[usize], xs: &[f64], offset: usize) -> Result<NodeId, GradError> {
    let len: usize = shape.iter().product();
    let values = ArrayD::from_shape_vec(IxDyn(shape), xs[offset..offset + len].to_vec())
        .expect("shape matches slice length");
    tape.leaf(values)
}

fn arithmetic_broadcast(tape: &mut Tape, xs: &[f64]) -> Result<(NodeId, Vec<NodeId>), GradError> {
    let m = leaf(tape, &[2, 3], xs, 0)?;
    let row = leaf(tape, &[3], xs, 6)?;
    let sum = tape.add(m, row);
    let diff = tape.sub(sum, row);
    let prod = tape.mul(diff, m);
    let total = tape.sum(prod);
    Ok((tape.scale(total, 0.37), vec![m, row]))
}

fn matmul_shapes(tape: &mut Tape, xs: &[f64]) -> Result<(NodeId, Vec<NodeId>), GradError> {
    let a = leaf(tape, &[2, 2], xs, 0)?;
    let b = leaf(tape, &[2, 2], xs, 4)?;
    let x = leaf(tape, &[2], xs, 8)?;
    let ab = tape.matmul(a, b)?;
    let abx = tape.matmul(ab, x)?;
    let xa = tape.matmul(x, a)?;
    let prod = tape.mul(abx, xa);
    Ok((tape.sum(prod), vec![a, b, x]))
}

fn softmax_family(tape: &mut Tape, xs: &[f64]) -> Result<(NodeId, Vec<NodeId>), GradError> {
    let m = leaf(tape, &[2, 3], xs, 0)?;
    let soft = tape.softmax(m, 0.6)?;
    let log_soft = tape.log(soft);
    let left = tape.sum(log_soft);
    let lse = tape.logsumexp_row(m)?;
    let exp_lse = tape.exp(lse);
    let right = tape.sum(exp_lse);
    Ok((tape.add(left, right), vec![m]))
}

fn gather_concat_tanh(tape: &mut Tape, xs: &[f64]) -> Result<(NodeId, Vec<NodeId>), GradError> {
    let m = leaf(tape, &[2, 3], xs, 0)?;
    let u = leaf(tape, &[2], xs, 6)?;
    let row = tape.gather(m, 1)?;
    let joined = tape.concat(&[row, u])?;
    let th = tape.tanh(joined);
    let total = tape.sum(th);
    let last = tape.gather(th, 4)?;
    Ok((tape.add(total, last), vec![m, u]))
}

fn transpose_mean(tape: &mut Tape, xs: &[f64]) -> Result<(NodeId, Vec<NodeId>), GradError> {
    let m = leaf(tape, &[3, 2], xs, 0)?;
    let u = leaf(tape, &[3], xs, 6)?;
    let t = tape.transpose(m)?;
    let shifted = tape.add(t, u);
    Ok((tape.mean(shifted), vec![m, u]))
}

fn max_row_graph(tape: &mut Tape, xs: &[f64]) -> Result<(NodeId, Vec<NodeId>), GradError> {
    let m = leaf(tape, &[2, 3], xs, 0)?;
    let maxes = tape.max_row(m)?;
    Ok((tape.sum(maxes), vec![m]))
}

/// The named primitive graphs, each with the number of inputs it reads.
const PRIMITIVE_GRAPHS: &[(&str, usize, Builder)] = &[
    ("arithmetic_broadcast", 9, arithmetic_broadcast),
    ("matmul_shapes", 10, matmul_shapes),
    ("softmax_family", 6, softmax_family),
    ("gather_concat_tanh", 8, gather_concat_tanh),
    ("transpose_mean", 8, transpose_mean),
    ("max_row", 6, max_row_graph),
];

fn primitive_rel_err(builder: Builder, xs: &[f64]) -> Result<f64, HarnessError> {
    let mut tape = Tape::new();
    let (loss, leaves) = builder(&mut tape, xs)?;
    tape.backward(loss)?;
    let mut grad = Vec::new();
    for l in leaves {
        grad.extend(tape.grad(l).expect("leaf gradient").iter().copied());
    }
    let fd = finite_diff(
        &mut |v: &[f64]| {
            let mut probe = Tape::new();
            let (node, _) = builder(&mut probe, v).expect("builder rebuilds");
            probe.value_scalar(node)
        },
        xs,
        FD_STEP,
    );
    Ok(max_rel_err(&grad, &fd))
}

/// Every tape primitive against central finite differences on several
/// randomized restarts, plus the two structural identities that FD cannot
/// see: straight-through estimation must route exactly the soft gradient,
/// and re-recording the same graph must reproduce bit-identical values and
/// gradients.
pub fn check_grad_primitives(seed: u64) -> Result<(bool, String), HarnessError> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut unit = move || (rng.next_u64() >> 11) as f64 * 2_f64.powi(-53);
    const RESTARTS: usize = 8;

    let mut worst = 0.0_f64;
    let mut worst_name = "";
    for &(name, dim, builder) in PRIMITIVE_GRAPHS {
        for _ in 0..RESTARTS {
            let xs: Vec<f64> = loop {
                let candidate: Vec<f64> = (0..dim).map(|_| 4.0 * unit() - 2.0).collect();
                if name != "max_row"
                    || candidate.chunks(3).all(|row| {
                        let mut sorted = row.to_vec();
                        sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
                        sorted[0] - sorted[1] > 1e-2
                    })
                {
                    break candidate;
                }
                // Near-tied maxima put the FD probe astride the kink in
                // max_row; redraw until every row has a clear winner.
            };
            let rel = primitive_rel_err(builder, &xs)?;
            if rel > worst {
                worst = rel;
                worst_name = name;
            }
        }
    }

    // Straight-through must backpropagate exactly the soft path's gradient.
    let values: Vec<f64> = (0..6).map(|_| 4.0 * unit() - 2.0).collect();
    let soft_grad = {
        let mut tape = Tape::new();
        let m = leaf(&mut tape, &[2, 3], &values, 0)?;
        let soft = tape.softmax(m, 0.8)?;
        let weights = tape.vector(&[0.3, -0.7, 1.1, 0.2, -0.4, 0.9]);
        let prod = tape.mul(soft, weights);
        let loss = tape.sum(prod);
        tape.backward(loss)?;
        tape.grad(m).expect("leaf gradient")
    };
    let st_grad = {
        let mut tape = Tape::new();
        let m = leaf(&mut tape, &[2, 3], &values, 0)?;
        let soft = tape.softmax(m, 0.8)?;
        let hard = tape.max_row(m)?;
        let st = tape.straight_through(hard, soft)?;
        let weights = tape.vector(&[0.3, -0.7, 1.1, 0.2, -0.4, 0.9]);
        let prod = tape.mul(st, weights);
        let loss = tape.sum(prod);
        tape.backward(loss)?;
        tape.grad(m).expect("leaf gradient")
    };
    let st_exact = soft_grad
        .iter()
        .zip(st_grad.iter())
        .all(|(a, b)| a.to_bits() == b.to_bits());

    // Bitwise determinism: the same graph recorded twice agrees to the bit.
    let xs: Vec<f64> = (0..9).map(|_| 4.0 * unit() - 2.0).collect();
    let run = |xs: &[f64]| -> Result<(f64, Vec<f64>), HarnessError> {
        let mut tape = Tape::new();
        let (loss, leaves) = arithmetic_broadcast(&mut tape, xs)?;
        tape.backward(loss)?;
        let mut grad = Vec::new();
        for l in leaves {
            grad.extend(tape.grad(l).expect("leaf gradient").iter().copied());
        }
        Ok((tape.value_scalar(loss), grad))
    };
    let (v1, g1) = run(&xs)?;
    let (v2, g2) = run(&xs)?;
    let deterministic = v1.to_bits() == v2.to_bits()
        && g1.len() == g2.len()
        && g1
            .iter()
            .zip(g2.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());

    let passed = worst < PRIMITIVE_FD_TOL && st_exact && deterministic;
    Ok((
        passed,
        format!(
            "worst fd rel err {worst:.2e} ({worst_name}, tol {PRIMITIVE_FD_TOL:.0e}), \
             straight-through exact {st_exact}, re-record bitwise {deterministic}"
        ),
    ))
}

/// One cell of the variance-ordering sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariancePoint {
    pub instance: String,
    pub seed: u64,
    pub budget: usize,
    pub tau: f64,
    pub r_gumbel: Option<f64>,
    pub r_gumbel_st: Option<f64>,
    pub r_ms: Option<f64>,
    pub r_ms_c: Option<f64>,
    /// Both relaxed ratios finite and strictly below both score-function
    /// ratios.
    pub satisfied: bool,
}

/// Runs the four estimators on every `(instance, seed, budget, tau)` cell
/// with coupled noise: all four see streams seeded identically per cell, so
/// the comparison is paired rather than fighting seed luck.
pub fn variance_ordering_points(
    instances: &[&GoldenInstance],
    seeds: &[u64],
    budgets: &[usize],
    taus: &[f64],
    master: &GumbelNoiseStream,
) -> Result<Vec<VariancePoint>, HarnessError> {
    let mut points = Vec::new();
    let mut cell_index = 0_u64;
    for g in instances {
        let table = g.table()?;
        let objective = BenchObjective::for_instance(g);
        for &seed in seeds {
            for &budget in budgets {
                for &tau in taus {
                    let cell_seed = master.fork(cell_index).seed() ^ seed;
                    cell_index += 1;
                    let opts = EstimateOptions {
                        n_samples: budget,
                        tau,
                        ..EstimateOptions::default()
                    };
                    let mut ratio = |kind: EstimatorKind| -> Result<Option<f64>, HarnessError> {
                        let mut stream = GumbelNoiseStream::seeded(cell_seed);
                        let report = estimate(kind, &objective, &table, &opts, &mut stream)?;
                        Ok(report.log_variance_ratio)
                    };
                    let r_gumbel = ratio(EstimatorKind::GumbelCrf)?;
                    let r_gumbel_st = ratio(EstimatorKind::GumbelCrfSt)?;
                    let r_ms = ratio(EstimatorKind::ReinforceMs)?;
                    let r_ms_c = ratio(EstimatorKind::ReinforceMsC)?;
                    let satisfied = match (r_gumbel, r_gumbel_st, r_ms, r_ms_c) {
                        (Some(g1), Some(g2), Some(m1), Some(m2)) => {
                            g1.max(g2) < m1.min(m2)
                        }
                        _ => false,
                    };
                    points.push(VariancePoint {
                        instance: g.name.to_string(),
                        seed,
                        budget,
                        tau,
                        r_gumbel,
                        r_gumbel_st,
                        r_ms,
                        r_ms_c,
                        satisfied,
                    });
                }
            }
        }
    }
    Ok(points)
}

/// The relaxed estimators' variance advantage holds across most of the
/// pinned sweep: at least [`VARIANCE_ORDERING_FRACTION`] of cells must have
/// both relaxed log variance-to-signal ratios strictly below both
/// score-function ones.
pub fn check_variance_ordering(
    instances: &[&GoldenInstance],
    master: &GumbelNoiseStream,
) -> Result<(bool, String), HarnessError> {
    let points = variance_ordering_points(
        instances,
        VARIANCE_SEEDS,
        VARIANCE_BUDGETS,
        VARIANCE_TAUS,
        master,
    )?;
    if points.is_empty() {
        return Ok((true, "no sweep instances selected".into()));
    }
    let satisfied = points.iter().filter(|p| p.satisfied).count();
    let fraction = satisfied as f64 / points.len() as f64;
    Ok((
        fraction >= VARIANCE_ORDERING_FRACTION,
        format!(
            "{satisfied}/{} cells ordered ({:.1}%, need {:.0}%)",
            points.len(),
            100.0 * fraction,
            100.0 * VARIANCE_ORDERING_FRACTION
        ),
    ))
}

/// Runs the full suite for a resolved configuration.
pub fn run_checks(cfg: &ExperimentConfig) -> Result<CheckOutcome, HarnessError> {
    let start = Instant::now();
    let all = registry();
    let selected: Vec<(usize, &GoldenInstance)> = if cfg.check.instances.is_empty() {
        all.iter().enumerate().collect()
    } else {
        cfg.check
            .instances
            .iter()
            .map(|name| {
                all.iter()
                    .enumerate()
                    .find(|(_, g)| g.name == name)
                    .ok_or_else(|| HarnessError::UnknownInstance(name.clone()))
            })
            .collect::<Result<_, _>>()?
    };

    let master = GumbelNoiseStream::seeded(cfg.seed);
    let mut outcome = CheckOutcome::default();

    for &(idx, g) in &selected {
        let idx = idx as u64;
        let overrides = cfg.check.bounds.get(g.name);

        outcome
            .records
            .push(run_one("registry_digest", g.name, || check_digest(g)));
        outcome
            .records
            .push(run_one("dp_exactness", g.name, || check_dp_exactness(g)));
        outcome.records.push(run_one("sampler_gof", g.name, || {
            let mut stream = master.fork(GOF_STREAM + idx);
            check_sampler_gof(g, &mut stream, cfg.check.gof_samples, cfg.check.gof_alpha)
        }));
        outcome.records.push(run_one("coupling", g.name, || {
            let mut stream = master.fork(COUPLING_STREAM + idx);
            check_coupling(g, &mut stream, cfg.check.coupling_draws)
        }));
        outcome.records.push(run_one("tau_limit", g.name, || {
            let mut stream = master.fork(TAU_STREAM + idx);
            check_tau_limit(g, &mut stream, &cfg.check.tau_grid, cfg.check.tau_draws)
        }));
        if SHARP_INSTANCES.contains(&g.name) {
            outcome.records.push(run_one("tau_sharpness", g.name, || {
                let mut stream = master.fork(SHARP_STREAM + idx);
                let coldest = *cfg
                    .check
                    .tau_grid
                    .last()
                    .ok_or_else(|| HarnessError::Config("empty tau grid".into()))?;
                check_tau_sharpness(g, &mut stream, coldest, cfg.check.tau_draws)
            }));
        }
        outcome.records.push(run_one("ffbs_tv", g.name, || {
            let mut stream = master.fork(TV_STREAM + idx);
            check_tv_regression(g, &mut stream, overrides.and_then(|o| o.ffbs_tv_10k))
        }));
        let pm_floor = overrides
            .and_then(|o| o.pm_tv_floor_100k)
            .or(g.bounds.pm_tv_floor_100k);
        if let Some(floor) = pm_floor {
            outcome.records.push(run_one("pm_bias", g.name, || {
                let mut stream = master.fork(PM_STREAM + idx);
                check_pm_bias(g, &mut stream, floor, cfg.check.pm_draws)
            }));
        }
        outcome
            .records
            .push(run_one("score_function_unbiased", g.name, || {
                let mut stream = master.fork(UNBIASED_STREAM + idx);
                check_score_function_unbiased(
                    g,
                    &mut stream,
                    cfg.check.unbiased_budget,
                    cfg.check.z_limit,
                )
            }));
        if FD_INSTANCES.contains(&g.name) {
            outcome.records.push(run_one("pathwise_fd", g.name, || {
                let mut stream = master.fork(FD_STREAM + idx);
                check_pathwise_fd(g, &mut stream)
            }));
        }
    }

    outcome.records.push(run_one("grad_primitives", "-", || {
        check_grad_primitives(cfg.seed ^ 0x5EED_CAFE)
    }));

    let sweep: Vec<&GoldenInstance> = selected
        .iter()
        .map(|&(_, g)| g)
        .filter(|g| VARIANCE_INSTANCES.contains(&g.name))
        .collect();
    if !sweep.is_empty() {
        outcome
            .records
            .push(run_one("variance_ordering", "-", || {
                let stream = master.fork(VARIANCE_STREAM);
                check_variance_ordering(&sweep, &stream)
            }));
    }

    let elapsed = start.elapsed().as_secs_f64();
    outcome.records.push(CheckRecord {
        check: "runtime_under_5_minutes".into(),
        instance: "-".into(),
        passed: elapsed < 300.0,
        detail: format!("{elapsed:.1} s elapsed"),
        seconds: elapsed,
    });

    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Overrides;

    fn quick_config(instance: &str) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::resolve(None, &Overrides::default()).unwrap();
        cfg.seed = 11;
        cfg.check.instances = vec![instance.to_string()];
        cfg.check.gof_samples = 2_000;
        cfg.check.coupling_draws = 50;
        cfg.check.tau_draws = 200;
        cfg.check.unbiased_budget = 2_000;
        cfg.check.pm_draws = 5_000;
        cfg
    }

    #[test]
    fn bench_objective_soft_matches_hard_on_onehots() {
        let objective = BenchObjective::seeded(3, 4, 99);
        let path = vec![2usize, 0, 1, 1];
        let mut tape = Tape::new();
        let rows: Vec<NodeId> = path
            .iter()
            .map(|&s| {
                let mut row = vec![0.0; 3];
                row[s] = 1.0;
                tape.vector(&row)
            })
            .collect();
        let node = objective.record_soft(&mut tape, &rows).unwrap();
        let soft_value = tape.value_scalar(node);
        let hard_value = objective.eval_hard(&path);
        assert!(
            (soft_value - hard_value).abs() < 1e-12,
            "soft {soft_value} vs hard {hard_value}"
        );

        // Same seed, same objective.
        let again = BenchObjective::seeded(3, 4, 99);
        assert_eq!(again.eval_hard(&path), hard_value);
    }

    #[test]
    fn check_record_round_trips_through_jsonl() {
        let record = CheckRecord {
            check: "dp_exactness".into(),
            instance: "k2_t2_mixed".into(),
            passed: true,
            detail: "log_z err 0.0e0".into(),
            seconds: 0.01,
        };
        let line = serde_json::to_string(&record).unwrap();
        let back: CheckRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back.check, record.check);
        assert_eq!(back.instance, record.instance);
        assert!(back.passed);
    }

    #[test]
    fn corrupted_digest_is_caught() {
        let mut doctored = *registry().first().unwrap();
        doctored.digest ^= 0xDEAD_BEEF;
        let (passed, detail) = check_digest(&doctored).unwrap();
        assert!(!passed, "doctored digest accepted: {detail}");
    }

    #[test]
    fn corrupted_tv_bound_fails_only_the_corrupted_run() {
        let name = "k2_t2_mixed";
        let clean = run_checks(&quick_config(name)).unwrap();
        let clean_tv_failures = clean
            .records
            .iter()
            .filter(|r| r.check == "ffbs_tv" && !r.passed)
            .count();
        assert_eq!(clean_tv_failures, 0, "clean run tripped the tv regression");

        let mut corrupted_cfg = quick_config(name);
        corrupted_cfg
            .check
            .bounds
            .entry(name.to_string())
            .or_default()
            .ffbs_tv_10k = Some(1e-9);
        let corrupted = run_checks(&corrupted_cfg).unwrap();
        let tv_failures: Vec<_> = corrupted
            .records
            .iter()
            .filter(|r| r.check == "ffbs_tv" && !r.passed)
            .collect();
        assert_eq!(tv_failures.len(), 1, "impossible bound not flagged");
        assert_eq!(tv_failures[0].instance, name);
        assert!(!corrupted.all_passed());
    }

    #[test]
    fn unknown_instance_is_rejected_by_name() {
        let mut cfg = quick_config("k2_t2_mixed");
        cfg.check.instances = vec!["k9_t9_nonsense".into()];
        match run_checks(&cfg) {
            Err(HarnessError::UnknownInstance(name)) => assert_eq!(name, "k9_t9_nonsense"),
            other => panic!("expected unknown-instance error, got {other:?}"),
        }
    }

    #[test]
    fn single_path_instance_passes_gof_and_coupling() {
        let g = crate::registry::find("k1_t4_flat").unwrap();
        let mut stream = GumbelNoiseStream::seeded(5);
        let (gof_pass, gof_detail) = check_sampler_gof(g, &mut stream, 500, 0.001).unwrap();
        assert!(gof_pass, "{gof_detail}");
        assert!(gof_detail.contains("single admissible path"));
        let mut stream = GumbelNoiseStream::seeded(6);
        let (coupling_pass, coupling_detail) = check_coupling(g, &mut stream, 20).unwrap();
        assert!(coupling_pass, "{coupling_detail}");
    }

    #[test]
    fn grad_primitives_probe_passes() {
        let (passed, detail) = check_grad_primitives(7).unwrap();
        assert!(passed, "{detail}");
    }

    #[test]
    fn pathwise_fd_probe_passes_on_smallest_instance() {
        let g = crate::registry::find("k2_t2_mixed").unwrap();
        let mut stream = GumbelNoiseStream::seeded(13);
        let (passed, detail) = check_pathwise_fd(g, &mut stream).unwrap();
        assert!(passed, "{detail}");
    }

    #[test]
    fn param_dim_matches_flat_layout() {
        let g = crate::registry::find("k3_t4_mixed").unwrap();
        let table = g.table().unwrap();
        let flat = table_to_flat(&table);
        assert_eq!(flat.len(), param_dim(table.num_states(), table.seq_len()));
    }

    /// Prints the observed statistics behind every pinned bound in this
    /// module: mixed-row rates for the sharpness pin, worst z-scores for the
    /// unbiasedness limit, pathwise FD errors for the frozen-noise pins, and
    /// the variance-ordering fraction. Run with:
    /// `cargo test -p crfkit check_pilot -- --ignored --nocapture`
    #[test]
    #[ignore]
    fn print_check_pilot() {
        let all = registry();
        let master = GumbelNoiseStream::seeded(7);

        println!("--- sharpness at tau 0.01 (2000 draws) ---");
        for (idx, g) in all.iter().enumerate() {
            let mut stream = master.fork(SHARP_STREAM + idx as u64);
            let (passed, detail) = check_tau_sharpness(g, &mut stream, 0.01, 2_000).unwrap();
            println!("{:28} {} {}", g.name, if passed { "ok  " } else { "MIX " }, detail);
        }

        println!("--- score-function worst z at 20k budget ---");
        for (idx, g) in all.iter().enumerate() {
            let mut stream = master.fork(UNBIASED_STREAM + idx as u64);
            let (passed, detail) =
                check_score_function_unbiased(g, &mut stream, 20_000, f64::INFINITY).unwrap();
            println!("{:28} {} {}", g.name, passed, detail);
        }

        println!("--- pathwise fd ---");
        for (idx, g) in all.iter().enumerate() {
            if !FD_INSTANCES.contains(&g.name) {
                continue;
            }
            let mut stream = master.fork(FD_STREAM + idx as u64);
            let (_, detail) = check_pathwise_fd(g, &mut stream).unwrap();
            println!("{:28} {}", g.name, detail);
        }

        println!("--- variance ordering (pinned sweep) ---");
        let sweep: Vec<&GoldenInstance> = all
            .iter()
            .filter(|g| VARIANCE_INSTANCES.contains(&g.name))
            .collect();
        let stream = master.fork(VARIANCE_STREAM);
        let points = variance_ordering_points(
            &sweep,
            VARIANCE_SEEDS,
            VARIANCE_BUDGETS,
            VARIANCE_TAUS,
            &stream,
        )
        .unwrap();
        for p in &points {
            println!(
                "{:28} seed {} n {:4} tau {:4} gumbel {:?} st {:?} ms {:?} msc {:?} -> {}",
                p.instance, p.seed, p.budget, p.tau, p.r_gumbel, p.r_gumbel_st, p.r_ms, p.r_ms_c,
                p.satisfied
            );
        }
        let satisfied = points.iter().filter(|p| p.satisfied).count();
        println!("ordered {}/{}", satisfied, points.len());
    }
}
