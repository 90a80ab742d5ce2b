use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite even with jitter {max_jitter:e} (dim {dim})")]
    NotPositiveDefinite { dim: usize, max_jitter: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite training loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("invalid label {label} for {family}")]
    InvalidLabel { family: &'static str, label: String },

    #[error("pushforward method {method} is not supported for {family}")]
    UnsupportedMethod {
        method: &'static str,
        family: &'static str,
    },

    #[error("per-input noise block {index} is not usable: {reason}")]
    SingularLambda { index: usize, reason: String },

    #[error("dual precision block {index} is not usable: {reason}")]
    SingularBeta { index: usize, reason: String },

    #[error("invalid number of inducing points {m} for {n} inputs")]
    InvalidM { m: usize, n: usize },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("label column {0} not found")]
    MissingLabelColumn(String),

    #[error("split {split} is empty (N = {n})")]
    EmptySplit { split: &'static str, n: usize },

    #[error("length mismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported file version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerical machinery rather than of inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite { .. }
                | Error::NonFiniteLoss { .. }
                | Error::SingularLambda { .. }
                | Error::SingularBeta { .. }
        )
    }

    /// True for malformed or unusable data files.
    pub fn is_data(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::MissingLabelColumn(_)
                | Error::EmptySplit { .. }
                | Error::InvalidLabel { .. }
                | Error::Csv(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
