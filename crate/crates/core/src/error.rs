use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor math, model evaluation and data loading.
#[derive(Debug)]
pub enum Error {
    /// Operands have incompatible shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A matrix required to be invertible (or SPD) is singular.
    Singular { op: &'static str, detail: String },
    /// A computation produced or received a non-finite value.
    NonFinite { context: String },
    /// A caller-supplied argument is out of its documented domain.
    InvalidArgument { context: String },
    /// Underlying I/O failure.
    Io(std::io::Error),
    /// A file did not match its expected format.
    Format { context: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch {left:?} vs {right:?}")
            }
            Error::Singular { op, detail } => write!(f, "{op}: singular matrix ({detail})"),
            Error::NonFinite { context } => write!(f, "non-finite value: {context}"),
            Error::InvalidArgument { context } => write!(f, "invalid argument: {context}"),
            Error::Io(e) => write!(f, "io error: {e}"),
            Error::Format { context } => write!(f, "format error: {context}"),
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
