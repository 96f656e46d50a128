use std::io;

/// Errors produced by the crowd analysis library.
#[derive(thiserror::Error, Debug)]
pub enum Error {
    /// A precondition on the input values was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// Two inputs that must agree in shape do not.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: String, got: String },
    /// A box or pixel lies outside the raster it refers to.
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
    /// A file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),
    /// A geometric configuration is degenerate (collinear points, singular matrix).
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    /// A viewing ray does not hit the terrain plane.
    #[error("no intersection with terrain plane at pixel ({u:.3}, {v:.3})")]
    NoIntersection { u: f64, v: f64 },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn mismatch(expected: impl ToString, got: impl ToString) -> Self {
        Error::DimensionMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// True for errors caused by the filesystem rather than by the data.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
