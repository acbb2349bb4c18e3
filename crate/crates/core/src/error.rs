use alloc::string::String;
use core::fmt;

/// Errors raised by lattice construction, inference and the losses.
#[derive(Clone, Debug, PartialEq)]
pub enum Error {
    /// A precondition on an argument was violated.
    InvalidArgument(String),
    /// The constraint admits no path of the search space, so the supervision
    /// cannot be represented (e.g. more labels than frames).
    EmptyLanguage,
    /// No path reaches the final vertex.
    NoPath,
    /// A path does not belong to the search space it was used with.
    PathNotInSpace(String),
    /// Tensor shapes disagree.
    ShapeMismatch(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::EmptyLanguage => {
                write!(f, "ground truth not representable: constrained search space is empty")
            }
            Error::NoPath => write!(f, "no path reaches the final vertex"),
            Error::PathNotInSpace(msg) => write!(f, "path not in search space: {msg}"),
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
