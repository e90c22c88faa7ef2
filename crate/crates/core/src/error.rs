//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A record in an input file could not be parsed. `line` is 1-based.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// An input violated a documented precondition or invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A prompt template is missing a slot or contains an unknown one.
    #[error("template error: {0}")]
    Template(String),

    /// An operation was invoked on data in the wrong state
    /// (e.g. an objective over rollouts without advantages).
    #[error("state error: {0}")]
    State(String),

    /// A checkpoint or parameter file failed its integrity checks.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// A target summary could not be expressed as policy actions.
    #[error("unmatched target sentences: {0:?}")]
    Mapping(Vec<String>),

    /// A generation backend failed. `retryable` distinguishes transient
    /// transport faults (timeouts, rate limits, 5xx) from fatal ones.
    #[error("transport error ({}): {message}", if *.retryable { "retryable" } else { "fatal" })]
    Transport { retryable: bool, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
