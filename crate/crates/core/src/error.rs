use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotADistribution { row: usize, sum: f64 },

    #[error("label class has predicted probability 0; cross-entropy is +inf")]
    ZeroProbability,

    #[error("matrix is not symmetric")]
    NotSymmetric,

    #[error("eigen-solver did not converge after {0} iterations")]
    NoConvergence(usize),

    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid field `{field}`: {message}")]
    InvalidField { field: &'static str, message: String },

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("unknown config `{config}` for dataset `{dataset}`")]
    UnknownConfig { dataset: String, config: String },

    #[error("{path}: row {row}: {message}")]
    Schema { path: PathBuf, row: usize, message: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
