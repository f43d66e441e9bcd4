use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Input outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Operator or matrix assembly failed.
    #[error("assembly error: {0}")]
    Assembly(String),

    /// An iterative or direct solver did not produce a valid solution.
    #[error("solver failure: {context} (residual {residual:.3e})")]
    Solver { context: String, residual: f64 },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn solver(context: impl Into<String>, residual: f64) -> Self {
        Error::Solver {
            context: context.into(),
            residual,
        }
    }
}
