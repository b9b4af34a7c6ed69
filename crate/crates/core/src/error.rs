//! One error type for the whole crate, partitioned by failure class so
//! callers (and the CLI exit-code mapping) can tell user mistakes from
//! broken files from runs that went numerically off the rails.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A variable was used with a tape it does not belong to.
    #[error("graph error: {0}")]
    Graph(String),

    /// Invalid argument, configuration, or input data.
    #[error("validation error: {0}")]
    Validation(String),

    /// A file exists but its contents are not what the format requires.
    #[error("format error: {0}")]
    Format(String),

    /// A checkpoint parses but does not match the requested architecture.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    /// A statistic that needs spread in its input got none.
    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    /// Training produced a non-finite loss.
    #[error("divergence: {0}")]
    Divergence(String),

    /// A gradient check could not produce a trustworthy answer.
    #[error("unreliable gradient check: {0}")]
    UnreliableCheck(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape(_)
            | Error::Graph(_)
            | Error::Validation(_)
            | Error::DegenerateVariance(_)
            | Error::UnreliableCheck(_) => 1,
            Error::Format(_) | Error::Incompatible(_) | Error::Io(_) => 2,
            Error::Divergence(_) => 3,
        }
    }
}
