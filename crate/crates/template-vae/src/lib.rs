//! Desk-scale latent-template VAE over word sequences.
//!
//! Generative side: words and control states are produced in turn by a
//! single-layer tanh recurrent cell,
//!
//! ```text
//!   p(x, z) = prod_t p(z_t | z_{<t}, x_{<t}) p(x_t | z_t, z_{<t}, x_{<t})
//! ```
//!
//! Inference side: a chain CRF `q(z | x)` whose emission potentials are
//! predicted position-wise from a ±1 window of word embeddings. Training
//! maximizes
//!
//! ```text
//!   ELBO = E_{q(z|x)}[log p(x, z)] + beta * H[q(z|x)]
//! ```
//!
//! where the expectation is handled by any of the gradient estimators from
//! the `estimators` crate (exact enumeration at oracle scale, score-function
//! with leave-one-out baselines, relaxed backward sampling, perturbed
//! Viterbi and their straight-through variants) and the entropy term is the
//! exact dynamic program, differentiated on the tape.
//!
//! Around the core: minibatch SGD training with temperature and word-dropout
//! schedules, importance-sampled NLL on hard posterior draws, MAP template
//! extraction with duplicate collapsing, posterior-collapse diagnostics, and
//! JSON checkpoints.

mod decoder;
mod diagnostics;
mod elbo;
mod encoder;
mod error;
mod nll;
mod params;
mod templates;
mod train;

pub mod checkpoint;

pub use decoder::{
    decoder_step, joint_log_prob_hard, joint_log_prob_soft, one_hot_rows, record_joint,
    word_logits, ThetaNodes,
};
pub use diagnostics::{
    collapse_diagnostics, CollapseDiagnostics, CONSTANT_POSTERIOR_TV, UNIFORM_POSTERIOR_ENTROPY,
};
pub use elbo::{elbo, ElboEstimate, ElboOptions};
pub use encoder::{potential_table, record_encoder, PhiNodes};
pub use error::VaeError;
pub use nll::{exact_log_marginal, importance_nll};
pub use params::{GenerativeParams, InferenceParams};
pub use templates::{collapse_states, extract_template};
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use train::{
    resume, train, EpochRecord, TauSchedule, TrainConfig, TrainingTrace, WordDropoutSchedule,
};
