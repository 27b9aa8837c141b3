//! Sampling machinery for chain-structured distributions.
//!
//! Exact posterior draws come from forward-filtering backward-sampling
//! ([`ffbs`]): one categorical draw per position, conditioned on the suffix
//! already drawn. Every categorical is realized by the Gumbel-max trick, so
//! the same pre-drawn noise can replace argmax with a tempered softmax to
//! give a relaxed sample ([`gumbelized_ffbs`]) whose hard path coincides
//! with the exact one draw for draw.
//!
//! [`perturb_and_map`] is the cheaper "perturb the factor tables once, then
//! decode" alternative. It reuses each noise variable across all paths
//! through a factor, which makes it biased as a sampler — measurably so, see
//! the diagnostics module — and [`relaxed_viterbi`] is its differentiable
//! counterpart with softened back-pointers.
//!
//! All randomness flows through [`GumbelNoiseStream`], which knows its seed
//! and can [`GumbelNoiseStream::fork`] per-sample child streams, so
//! experiments replay exactly regardless of scheduling.

mod diagnostics;
mod error;
mod noise;
mod perturb;
mod sample;

pub use diagnostics::{chi_square_gof, tv_distance, GofTest, PathCounts, MIN_EXPECTED_PER_CELL};
pub use error::SampleError;
pub use noise::{derived_seed, FfbsNoise, GumbelNoiseStream, PerturbNoise};
pub use perturb::{
    perturb_and_map, perturb_table, relaxed_viterbi, PerturbOptions, RelaxedViterbiTrellis,
};
pub use sample::{
    ffbs, ffbs_with_noise, gumbel_max, gumbel_softmax, gumbelized_ffbs,
    gumbelized_ffbs_with_noise, RelaxedPath,
};
