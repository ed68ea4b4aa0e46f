use std::fmt;

/// Errors produced by the toolkit.
#[derive(Debug)]
pub enum Error {
    /// Incompatible array extents. Carries both shapes involved.
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A precondition on a numeric argument was violated.
    InvalidArgument(String),
    /// Configuration rejected at validation time.
    Config(String),
    /// Malformed or corrupted on-disk artifact. `offset` is the byte
    /// position at which the problem was detected.
    Format {
        offset: u64,
        msg: String,
    },
    /// Training diverged.
    NonFinite {
        step: u64,
        what: String,
    },
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Shape { .. } | Error::InvalidArgument(_) | Error::Config(_))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Format { offset, msg } => write!(f, "bad file at byte offset {offset}: {msg}"),
            Error::NonFinite { step, what } => write!(f, "non-finite {what} at step {step}"),
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
