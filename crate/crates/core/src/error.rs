//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// A vector or matrix had the wrong dimension for the operation.
    DimMismatch { context: String, expected: usize, got: usize },
    /// A configuration value failed validation.
    InvalidConfig(String),
    /// A parameter, gradient, or loss became NaN/Inf; the message names it.
    NonFinite(String),
    /// `step` was called on an episode that already ended.
    EpisodeExhausted,
    /// An operation requires a non-empty input.
    EmptyInput(&'static str),
    /// Stage labels failed the suffix-max validity check.
    InvalidLabels(String),
    /// Demonstrations are required but none were provided.
    DemosRequired,
    /// A serialized file did not match the expected layout or version.
    Format(String),
    /// A dataset was recorded under a different environment spec.
    SpecMismatch { expected: String, got: String },
    /// A command needs an artifact that does not exist.
    MissingPrerequisite(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::DimMismatch { context, expected, got } => {
                write!(f, "{context}: expected dimension {expected}, got {got}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid config: {msg}"),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::EpisodeExhausted => write!(f, "episode exhausted: call reset before stepping"),
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::InvalidLabels(msg) => write!(f, "invalid stage labels: {msg}"),
            Error::DemosRequired => {
                write!(f, "demonstrations required: demo set is empty but demo_ratio > 0")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::SpecMismatch { expected, got } => {
                write!(f, "environment spec mismatch: expected {expected}, file has {got}")
            }
            Error::MissingPrerequisite(msg) => write!(f, "missing prerequisite: {msg}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
