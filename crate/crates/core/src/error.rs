//! Error type shared by every module of the crate.

use std::fmt;
use std::io;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, SpargeError>;

/// All failures the library reports.
///
/// `Validation`, `Format` and `Io` describe bad input and map to exit code 2
/// in the CLI; `Invariant` means internal state broke a guarantee the engine
/// relies on and maps to exit code 3.
#[derive(Debug)]
pub enum SpargeError {
    /// Caller-supplied arguments are inconsistent (shape mismatch, parameter
    /// out of range, malformed configuration).
    Validation(String),
    /// A tensor file does not follow the on-disk format.
    Format(String),
    /// An underlying I/O operation failed.
    Io(io::Error),
    /// An internal invariant was violated; the result cannot be trusted.
    Invariant(String),
}

impl fmt::Display for SpargeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SpargeError::Validation(msg) => write!(f, "validation error: {msg}"),
            SpargeError::Format(msg) => write!(f, "format error: {msg}"),
            SpargeError::Io(err) => write!(f, "io error: {err}"),
            SpargeError::Invariant(msg) => write!(f, "invariant violation: {msg}"),
        }
    }
}

impl std::error::Error for SpargeError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            SpargeError::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for SpargeError {
    fn from(err: io::Error) -> Self {
        SpargeError::Io(err)
    }
}

impl SpargeError {
    /// Shorthand for a `Validation` error.
    pub fn validation(msg: impl Into<String>) -> Self {
        SpargeError::Validation(msg.into())
    }

    /// Shorthand for a `Format` error.
    pub fn format(msg: impl Into<String>) -> Self {
        SpargeError::Format(msg.into())
    }

    /// Shorthand for an `Invariant` error.
    pub fn invariant(msg: impl Into<String>) -> Self {
        SpargeError::Invariant(msg.into())
    }
}
