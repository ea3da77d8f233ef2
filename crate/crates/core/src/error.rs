//! Error type shared across the crate.

use std::fmt;

/// All failure modes surfaced by the public API.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shape or extent mismatch; the message names the offending shapes.
    Dim(String),
    /// Invalid hyperparameter or construction argument.
    Config(String),
    /// A documented precondition was violated at call time.
    Precondition(String),
    /// Non-finite value where a finite one is required.
    Numeric(String),
    /// Malformed file; `offset` is the byte position of the defect.
    Format { offset: u64, msg: String },
    /// Synthetic-sample generation could not satisfy its constraints.
    Generation(String),
    /// Index out of range for the referenced collection.
    Index(String),
    /// Underlying I/O failure.
    Io(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dim(m) => write!(f, "dimension error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Precondition(m) => write!(f, "precondition error: {m}"),
            Error::Numeric(m) => write!(f, "numeric error: {m}"),
            Error::Format { offset, msg } => {
                write!(f, "format error at byte {offset}: {msg}")
            }
            Error::Generation(m) => write!(f, "generation error: {m}"),
            Error::Index(m) => write!(f, "index error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
