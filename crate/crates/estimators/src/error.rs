use thiserror::Error;

/// Errors from estimator construction or execution.
#[derive(Debug, Error)]
pub enum EstimatorError {
    /// The leave-one-out baseline is undefined for fewer than two samples.
    #[error("{estimator} needs at least {min} samples, got {got}")]
    TooFewSamples {
        estimator: &'static str,
        min: usize,
        got: usize,
    },

    /// A relaxed estimator was given an objective that only accepts hard
    /// paths.
    #[error("objective does not accept soft assignments; use a score-function estimator")]
    ObjectiveRejectsSoft,

    /// Tape recorders require fully finite tables; `-inf` cells are only
    /// supported by the value-level samplers.
    #[error("{0} requires a fully finite potential table")]
    NonFiniteTable(&'static str),

    #[error("bad option: {0}")]
    BadOptions(String),

    #[error("unknown estimator name: {0:?}")]
    UnknownEstimator(String),

    #[error(transparent)]
    Sample(#[from] structured_sampling::SampleError),

    #[error(transparent)]
    Grad(#[from] grad_engine::GradError),

    #[error(transparent)]
    Crf(#[from] crf_core::CrfError),
}
