use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    /// Malformed file content; `line` is zero-based.
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("unsupported architecture: {0}")]
    UnsupportedArchitecture(String),

    #[error("scenario mismatch: {0}")]
    ScenarioMismatch(String),

    /// A loss term became NaN or infinite during training.
    #[error("non-finite value in `{term}` at epoch {epoch}, step {step}")]
    NonFinite { term: String, epoch: usize, step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
