use thiserror::Error;

pub type Result<T, E = EspError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EspError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layout mismatch: expected length {expected}, got {actual}")]
    LayoutMismatch { expected: usize, actual: usize },

    #[error("unsupported check: {0}")]
    UnsupportedCheck(String),

    #[error("value iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("environment `{env}` failed: {source}")]
    Environment {
        env: String,
        #[source]
        source: Box<EspError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl EspError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        EspError::InvalidArgument(msg.into())
    }
}
