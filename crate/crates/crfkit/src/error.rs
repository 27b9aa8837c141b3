use std::path::PathBuf;
use thiserror::Error;

/// Everything the harness can fail with. The CLI maps [`HarnessError::Config`]
/// to exit code 2 and every other variant to exit code 1 (check failures get
/// their own dedicated path through [`crate::checks::CheckOutcome`]).
#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    #[error("unknown golden instance {0:?}")]
    UnknownInstance(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Crf(#[from] crf_core::CrfError),

    #[error(transparent)]
    Sample(#[from] structured_sampling::SampleError),

    #[error(transparent)]
    Estimator(#[from] estimators::EstimatorError),

    #[error(transparent)]
    Grad(#[from] grad_engine::GradError),

    #[error(transparent)]
    Vae(#[from] template_vae::VaeError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI should report for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::UnknownInstance(_) => 2,
            _ => 1,
        }
    }
}
