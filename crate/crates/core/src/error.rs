use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the surrogate-modeling pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (shapes, ranges, counts).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    /// Cholesky factorization failed even at the largest permitted jitter.
    #[error("covariance matrix is singular (jitter escalated to {jitter:e})")]
    SingularCovariance { jitter: f64 },

    #[error("every optimizer restart failed: {0}")]
    AllRestartsFailed(String),

    #[error("domain error in {function}: {reason}")]
    Domain { function: &'static str, reason: String },

    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error at {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv { path: path.into(), source }
    }
}
