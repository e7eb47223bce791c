use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("degenerate chain: {0}")]
    DegenerateChain(String),

    #[error("observation at time {time} is partially missing; only fully missing records are supported")]
    PartialMissing { time: usize },

    #[error("non-finite log-likelihood at the initial parameters")]
    InitFailure,

    #[error("k-means produced an empty cluster after {retries} re-seedings")]
    EmptyCluster { retries: usize },

    #[error("column `{column}` not found in {path}")]
    MissingColumn { column: String, path: PathBuf },

    #[error("row {row}, column `{column}`: cannot parse `{value}` as a number")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },

    #[error("{0} contains no data rows")]
    EmptyFile(PathBuf),

    #[error("model format version mismatch: expected `{expected}`, found `{found}`")]
    VersionMismatch { expected: String, found: String },

    #[error("corrupt model file: {0}")]
    CorruptFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
