use thiserror::Error;

/// Errors produced anywhere in the reduction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments. Maps to CLI exit code 2.
    #[error("configuration error: {0}")]
    Config(String),

    /// A solver or factorization failed. Maps to CLI exit code 1.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("iterative solver did not converge after {iterations} iterations (relative residual {residual:.3e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit status the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) => 2,
            Error::Io(_) => 2,
            Error::Numerical(_) | Error::NoConvergence { .. } => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
