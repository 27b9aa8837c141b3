//! Exact inference for linear-chain conditional random fields.
//!
//! A chain of length `T` over `K` states is scored by a time-homogeneous
//! transition table, a per-position emission table, and an initial-state
//! vector, all stored in log space:
//!
//! ```text
//! score(z) = log_initial[z_0] + log_emission[0][z_0]
//!          + sum_{t=1..T-1} ( log_transition[z_{t-1}][z_t] + log_emission[t][z_t] )
//! ```
//!
//! The normalized distribution is `p(z) = exp(score(z) - log_z)` with
//! `log_z = logsumexp over all K^T paths`. Everything in this crate stays in
//! log space; `f64::NEG_INFINITY` is a first-class "forbidden" score.
//!
//! The crate provides the forward/backward recursions, posterior marginals,
//! the exact posterior entropy recursion, Viterbi decoding, and a brute-force
//! enumeration oracle used to cross-check all of the above on small
//! instances.

mod enumerate;
mod error;
mod inference;
pub mod logspace;
mod potential;
mod trellis;

pub use enumerate::{enumerate_posterior, ExactPosterior, DEFAULT_ENUMERATION_CAP};
pub use error::CrfError;
pub use inference::{entropy, marginals, path_log_prob, path_score, viterbi};
pub use potential::{HardPath, PotentialTable};
pub use trellis::{backward, forward, BackwardTrellis, ForwardTrellis};
