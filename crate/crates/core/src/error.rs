use std::path::PathBuf;

use thiserror::Error;

use crate::datamodel::bundle::ValidationFailure;

/// Errors produced by the curation engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// A bundle failed validation. Always the first fatal check.
    #[error("bundle validation failed: {0}")]
    Validation(ValidationFailure),

    #[error("duplicate sample id `{0}`")]
    DuplicateSampleId(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },

    #[error("empty sequence")]
    EmptySequence,

    #[error("sequence length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("probability vector sums to {sum}, expected 1 within 1e-6")]
    NotNormalized { sum: f64 },

    #[error("negative probability {value} at index {index}")]
    NegativeProbability { index: usize, value: f64 },

    #[error("target index {target} out of range for vector of length {len}")]
    TargetOutOfRange { target: usize, len: usize },

    #[error("cannot form {k} clusters from {n} points")]
    TooFewPoints { n: usize, k: usize },

    #[error("k grid is empty")]
    EmptyGrid,

    #[error("budget {budget} exceeds the {kept} kept samples")]
    BudgetExceedsKept { budget: usize, kept: usize },

    #[error("sample `{0}` has a zero-norm embedding")]
    ZeroNorm(String),

    #[error("cannot remove {m} of {n} samples")]
    TooManyRemovals { m: usize, n: usize },

    #[error("pool budget {budget} is below the cluster count {k}")]
    PoolBudgetBelowClusters { budget: usize, k: usize },

    #[error("pool has no cluster assignments")]
    NotClustered,

    #[error("timestep {t} out of range (table has {columns} columns)")]
    TimestepOutOfRange { t: usize, columns: usize },

    #[error("upper bound for skill `{0}` is missing or non-positive")]
    BadUpperBound(String),

    #[error("malformed performance table: {0}")]
    Table(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("state directory {0} is locked by another engine instance")]
    StateLocked(PathBuf),

    #[error("corrupt state: {0}")]
    StateCorrupt(String),

    #[error("state conflict: {0}")]
    StateConflict(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
