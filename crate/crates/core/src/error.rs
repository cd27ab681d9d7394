use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by models, samplers, diagnostics and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("need at least {required} {what}, got {found}")]
    TooFew {
        what: &'static str,
        required: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("label {value} at row {row} is not binary (expected 0 or 1)")]
    NonBinaryLabel { row: usize, value: f64 },

    #[error("{what} must be positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },

    #[error("duplicate index {0} in minibatch")]
    DuplicateIndex(usize),

    #[error("index {index} out of range for {n} terms")]
    IndexOutOfRange { index: usize, n: usize },

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    #[error("sample covariance is singular (condition number {condition:e})")]
    SingularCovariance { condition: f64 },

    #[error("target covariance is not positive definite")]
    TargetNotPositiveDefinite,

    #[error("series has zero variance")]
    ConstantSeries,

    #[error("invalid configuration at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{diverged} of {chains} chains diverged (threshold {threshold})")]
    DivergenceThreshold {
        diverged: usize,
        chains: usize,
        threshold: f64,
    },

    #[error("budget audit failed: {0}")]
    BudgetAudit(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
