//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Result`]. Variants are
//! grouped by what went wrong rather than by module, so callers can match on
//! failure class (bad input, bad bytes, bad math) without caring which layer
//! raised it.

use std::io;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value (out-of-range rate, zero clients, ...).
    #[error("config: {0}")]
    Config(String),

    /// Tensor or vector dimensions do not line up.
    #[error("shape: {0}")]
    Shape(String),

    /// Dataset problem: empty batch, label out of range, count mismatch.
    #[error("data: {0}")]
    Data(String),

    /// NaN or infinity where a finite value is required.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Bytes do not parse as the wire format (bad magic, bad field, trailing junk).
    #[error("format: {0}")]
    Format(String),

    /// Bytes parse structurally but violate an internal consistency rule.
    #[error("corrupt message: {0}")]
    Corrupt(String),

    /// Message declares a version or payload kind this build does not speak.
    #[error("unsupported version: {0}")]
    Version(String),

    /// A value cannot be represented in the requested encoding.
    #[error("encode: {0}")]
    Encode(String),

    /// Connection setup, framing, or channel failure.
    #[error("transport: {0}")]
    Transport(String),

    /// A frame exceeds the configured size limit.
    #[error("frame too large: {0}")]
    FrameSize(String),

    /// A federated round could not produce a usable update.
    #[error("experiment: {0}")]
    Experiment(String),

    /// Invariant violation that indicates a bug in this crate.
    #[error("internal: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Shorthand for truncated-input errors, which are I/O by convention
    /// (a reader ran out of bytes mid-structure).
    pub(crate) fn truncated(what: &str) -> Error {
        Error::Io(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            format!("truncated {what}"),
        ))
    }
}
