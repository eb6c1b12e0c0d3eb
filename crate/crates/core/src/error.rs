use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Errors raised by the reduction kernels.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A grid with a zero dimension.
    InvalidShape { rows: usize, cols: usize },
    /// Tensor or sequence dimensions that do not line up.
    ShapeMismatch(&'static str, usize, usize),
    /// A scalar argument out of its allowed range.
    InvalidArgument(&'static str),
    /// A configuration that cannot be executed (e.g. a key-based metric without keys).
    Config(&'static str),
    /// A plan that does not describe the batch it is applied to.
    InconsistentPlan(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidShape { rows, cols } => {
                write!(f, "invalid grid shape {rows}x{cols}: both dimensions must be positive")
            }
            Error::ShapeMismatch(what, expected, got) => {
                write!(f, "shape mismatch in {what}: expected {expected}, got {got}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::InconsistentPlan(msg) => write!(f, "inconsistent plan: {msg}"),
        }
    }
}

impl core::error::Error for Error {}
