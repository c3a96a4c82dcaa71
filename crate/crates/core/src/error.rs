use thiserror::Error;

/// Errors raised across the simulator, learning and analysis layers.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violates a physical or mathematical domain restriction.
    #[error("domain error: {0}")]
    Domain(String),

    /// The pressure system could not be solved to tolerance.
    #[error("linear solver failed after {iterations} iterations (residual {residual:.3e})")]
    SolverFailure { iterations: usize, residual: f64 },

    /// Inconsistent or unsupported configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical invariant (boundedness, finiteness) was broken.
    #[error("numerical integrity error: {0}")]
    Numerical(String),

    /// An API was called in a state where it is not allowed.
    #[error("usage error: {0}")]
    Usage(String),

    /// Random-field generation failed.
    #[error("generation error: {0}")]
    Generation(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
