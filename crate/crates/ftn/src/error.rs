//! Error type shared by every layer of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// A spatial grid does not tile the feature map.
    #[error("grid layout error: {detail}")]
    Layout { detail: String },

    /// An argument is outside its legal range.
    #[error("invalid parameter {name}: {detail}")]
    Parameter { name: &'static str, detail: String },

    /// The caller misused an API contract (e.g. backward on a non-scalar).
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data violates its declared domain (e.g. label out of range).
    #[error("data error: {0}")]
    Data(String),

    /// An operation produced NaN or infinity from finite inputs.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    /// A configuration violates a structural invariant.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Training diverged (loss left the finite range).
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    /// A serialized artifact is malformed. `offset` is the byte position
    /// where decoding failed, when known.
    #[error("format error{}: {detail}", offset.map(|o| format!(" at byte {o}")).unwrap_or_default())]
    Format { detail: String, offset: Option<u64> },

    /// No configuration satisfies the requested budget.
    #[error("derivation failed: {detail}")]
    Derivation { detail: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn layout(detail: impl Into<String>) -> Self {
        Error::Layout {
            detail: detail.into(),
        }
    }

    pub fn parameter(name: &'static str, detail: impl Into<String>) -> Self {
        Error::Parameter {
            name,
            detail: detail.into(),
        }
    }

    pub fn format(detail: impl Into<String>, offset: Option<u64>) -> Self {
        Error::Format {
            detail: detail.into(),
            offset,
        }
    }
}
