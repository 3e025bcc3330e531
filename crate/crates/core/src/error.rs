use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration. `path` names the offending field.
    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    /// The state left the finite region (non-finite or above the divergence ceiling).
    #[error("divergence at step {step} of stream {stream}: {reason}")]
    Divergence {
        step: u64,
        stream: u64,
        reason: String,
        last_state: Vec<f64>,
    },

    #[error("assumption check failed: {0}")]
    AssumptionFailed(String),

    #[error("stationary distribution is not unique: {0}")]
    NonUnique(String),

    #[error("ill-conditioned linear system: {0}")]
    IllConditioned(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }
}
