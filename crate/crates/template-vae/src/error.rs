use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("bad model parameters: {0}")]
    BadParams(String),

    #[error("bad input sequence: {0}")]
    BadInput(String),

    #[error("bad options: {0}")]
    BadOptions(String),

    #[error("{estimator} needs at least {min} samples per estimate, got {got}")]
    TooFewSamples {
        estimator: &'static str,
        min: usize,
        got: usize,
    },

    #[error("non-finite loss at epoch {epoch}, update {update}{}", snapshot_note(.snapshot))]
    NanAbort {
        epoch: usize,
        update: usize,
        /// Where the diagnostic checkpoint was written, if a snapshot
        /// directory was configured.
        snapshot: Option<PathBuf>,
    },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),

    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Crf(#[from] crf_core::CrfError),

    #[error(transparent)]
    Grad(#[from] grad_engine::GradError),

    #[error(transparent)]
    Sample(#[from] structured_sampling::SampleError),

    #[error(transparent)]
    Estimator(#[from] estimators::EstimatorError),
}

fn snapshot_note(snapshot: &Option<PathBuf>) -> String {
    match snapshot {
        Some(p) => format!(" (snapshot written to {})", p.display()),
        None => String::new(),
    }
}
