//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by steering, estimation, training, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes are incompatible for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A configuration failed its invariants.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// An intervention addressed a site the model does not expose.
    #[error("unknown hook site: {0}")]
    UnknownSite(String),

    /// Non-finite values where finite ones are required (NaN in a sort,
    /// NaN gradient in an optimizer step, ...).
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Degenerate numerical input (zero-norm mean, empty record, single-class fit, ...).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// An iterative fit diverged.
    #[error("divergence at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
