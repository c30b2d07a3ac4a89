//! Crate-wide error type.
//!
//! Numeric contract violations (shape mismatches, non-finite values) and
//! data/IO problems share one enum so that call sites can propagate with `?`
//! and the CLI can map variants onto exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A forward computation produced NaN or infinity.
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    /// Elementwise division hit a zero denominator entry.
    #[error("{op}: division by zero")]
    DivisionByZero { op: &'static str },

    /// An index argument fell outside the operand's bounds.
    #[error("{op}: index {index} out of range ({bound} available)")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    /// Every position of an attention input is masked out.
    #[error("{op}: all positions are masked")]
    AllMasked { op: &'static str },

    /// Backward was requested from a non-scalar output.
    #[error("backward: loss must be a single value, got {len} elements")]
    NonScalarLoss { len: usize },

    /// An argument violated the named operation's contract.
    #[error("{op}: {detail}")]
    InvalidInput { op: &'static str, detail: String },

    /// A sequence or label file could not be parsed.
    #[error("{path}:{line}: {detail}")]
    Corpus {
        path: String,
        line: usize,
        detail: String,
    },

    /// A run configuration value is missing or malformed.
    #[error("config key `{key}`: {detail}")]
    Config { key: String, detail: String },

    /// A checkpoint file is malformed or inconsistent with the request.
    #[error("checkpoint: {detail}")]
    Checkpoint { detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidInput {
            op,
            detail: detail.into(),
        }
    }

    /// Config error constructor, exposed for the CLI front end.
    pub fn config(key: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn checkpoint(detail: impl Into<String>) -> Self {
        Error::Checkpoint {
            detail: detail.into(),
        }
    }
}
