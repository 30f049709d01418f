use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: line {line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("invalid dataset: {0}")]
    Validation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("numerical overflow in Sinkhorn scaling ({0}); try a larger epsilon")]
    SinkhornOverflow(String),

    #[error("Sinkhorn did not converge in {iterations} iterations (last change {last_change:.3e})")]
    NotConverged { iterations: usize, last_change: f64 },

    #[error("infeasible transport problem: {0}")]
    Infeasible(String),

    #[error("integration produced a non-finite state at step {step}")]
    IntegrationBlowup { step: usize },

    #[error("{0}")]
    Autodiff(String),

    #[error("interval {index}: {source}")]
    Interval {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at iteration {iteration}: {reason}")]
    Diverged {
        iteration: usize,
        reason: String,
        /// Last parameters whose loss was finite.
        last_good: Box<Option<crate::trainer::Model>>,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable short code used by the CLI and the C ABI.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Io { .. } => "io",
            Error::DimensionMismatch { .. } => "dimension",
            Error::ShapeMismatch(_) => "shape",
            Error::InvalidArgument(_) => "argument",
            Error::NonFinite(_) => "non_finite",
            Error::SinkhornOverflow(_) => "overflow",
            Error::NotConverged { .. } => "not_converged",
            Error::Infeasible(_) => "infeasible",
            Error::IntegrationBlowup { .. } => "integration",
            Error::Autodiff(_) => "autodiff",
            Error::Interval { source, .. } => source.code(),
            Error::Diverged { .. } => "diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::Json(_) => "json",
        }
    }
}
