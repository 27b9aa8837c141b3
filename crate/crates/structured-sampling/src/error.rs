use crf_core::CrfError;
use thiserror::Error;

/// Errors produced by the samplers and diagnostics.
#[derive(Debug, Error)]
pub enum SampleError {
    /// Every candidate of a categorical had weight `-inf`.
    #[error("all candidate states are forbidden")]
    AllForbidden,

    /// Relaxations need a strictly positive temperature.
    #[error("temperature must be strictly positive, got {0}")]
    BadTemperature(f64),

    /// Noise block or trellis dimensions do not match the table.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// A statistical test could not be formed (e.g. fewer than two cells
    /// after pooling).
    #[error("degenerate test: {0}")]
    DegenerateTest(String),

    /// Error from the underlying inference routines.
    #[error(transparent)]
    Crf(#[from] CrfError),
}
