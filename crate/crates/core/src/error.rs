//! Error type shared by every module in the crate.

use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Failure categories. The CLI maps these onto process exit codes, so the
/// distinction between configuration, format and numeric errors is load-bearing.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not satisfy an operation's contract.
    Shape { op: &'static str, detail: String },
    /// An operation produced NaN or Inf; never propagated silently.
    NonFinite { op: &'static str, detail: String },
    /// Input is numerically degenerate (near-zero norm, zero determinant, ...).
    Degenerate { op: &'static str, detail: String },
    /// Invalid configuration or dataset preconditions.
    Config { detail: String },
    /// An iterative solver failed to converge.
    Convergence { detail: String },
    /// Malformed bytes in one of the binary codecs.
    Format { detail: String },
    /// A sink (metrics log, checkpoint writer) reported a failure.
    Sink { detail: String },
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config { detail: detail.into() }
    }

    pub fn format(detail: impl Into<String>) -> Self {
        Error::Format { detail: detail.into() }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::NonFinite { op, detail } => write!(f, "non-finite value in {op}: {detail}"),
            Error::Degenerate { op, detail } => write!(f, "degenerate input in {op}: {detail}"),
            Error::Config { detail } => write!(f, "config error: {detail}"),
            Error::Convergence { detail } => write!(f, "no convergence: {detail}"),
            Error::Format { detail } => write!(f, "format error: {detail}"),
            Error::Sink { detail } => write!(f, "sink error: {detail}"),
        }
    }
}

impl core::error::Error for Error {}
