use thiserror::Error;

/// Errors produced while constructing or running inference on a potential
/// table.
#[derive(Debug, Error)]
pub enum CrfError {
    /// A dimension was zero or two components disagreed on `K`/`T`.
    #[error("bad shape: {0}")]
    BadShape(String),

    /// A table entry was `NaN` or `+inf` (`-inf` is the legal "forbidden"
    /// score).
    #[error("invalid score at {location}: {value}")]
    InvalidScore { location: String, value: f64 },

    /// Every path has score `-inf`, so the distribution is undefined.
    #[error("partition function is zero: every path is forbidden")]
    AllPathsForbidden,

    /// A path's states or length do not fit the table.
    #[error("path does not match table: {0}")]
    BadPath(String),

    /// `K^T` exceeds the enumeration cap.
    #[error("enumeration would visit {paths} paths, above the cap of {cap}")]
    EnumerationTooLarge { paths: u128, cap: u128 },

    /// JSON (de)serialization of a table failed.
    #[error("table serialization: {0}")]
    Serde(#[from] serde_json::Error),
}
