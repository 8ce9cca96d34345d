//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An input that must be finite was NaN or infinite.
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),

    /// A parameter violated its documented range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// Configuration parse or validation failure.
    #[error("config error: {0}")]
    Config(String),

    /// Covariance stayed non positive definite through the whole jitter ladder.
    #[error("gp fit failed: covariance not positive definite (jitter up to {max_jitter:e})")]
    GpNotPositiveDefinite { max_jitter: f64 },

    /// Active-set solver hit its iteration cap.
    #[error("qp solver did not converge after {iterations} iterations\n{diagnostic}")]
    QpNoConvergence { iterations: usize, diagnostic: String },

    /// NaN or divergence detected mid-run; the caller should checkpoint and abort.
    #[error("numerical fault: {0}")]
    NumericalFault(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
