//! Gradient estimators for expectations `E_{z ~ p(. | potentials)}[f(z)]`
//! over chain-structured distributions, differentiated with respect to the
//! potential-table entries.
//!
//! Three families, one interface:
//!
//! * [`exact_gradient`] — enumerate every path and differentiate the exact
//!   expectation on the tape. The ground truth everything else is judged by.
//! * [`reinforce_ms`] — multi-sample score-function estimator with a
//!   leave-one-out (or batch-mean) baseline, optionally shifted by a
//!   constant. Unbiased, high variance, needs at least two samples.
//! * [`gumbel_crf`] / [`pm_mrf`] — pathwise estimators that differentiate a
//!   relaxed sample directly: backward-sampled tempered softmaxes for the
//!   first, relaxed Viterbi on a perturbed table for the second. Both have
//!   straight-through variants that feed hard assignments forward while
//!   routing gradients through the soft ones. Biased (bias -> 0 with
//!   temperature for Gumbel-CRF), usually far lower variance.
//!
//! Every estimate comes back as a [`GradReport`]: mean gradient in a fixed
//! parameter layout ([`record::flatten_order`]), per-coordinate variances,
//! the log variance-to-signal ratio with degeneracies flagged, the mean
//! objective value, and wall-clock time.

mod error;
mod estimate;
mod objective;
pub mod record;
mod report;

pub use error::EstimatorError;
pub use estimate::{
    estimate, exact_gradient, gumbel_crf, gumbel_crf_st, pm_mrf, pm_mrf_st, reinforce_ms,
    reinforce_ms_c, BaselineMode, EstimateOptions, EstimatorKind, ExactGradient,
};
pub use objective::{AdjacentPairObjective, ConstantObjective, LinearObjective, Objective};
pub use report::{max_z_score, variance_ratio, GradAccumulator, GradReport, VarianceRatio};
