use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("index out of range: {0}")]
    Range(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("undefined schedule: {0}")]
    UndefinedSchedule(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sampler diverged: non-finite latent at step {step}")]
    SamplerDivergence { step: usize },
    #[error("training diverged: non-finite loss at step {step}")]
    TrainingDivergence { step: usize },
    #[error("malformed stream: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Shorthand for building a [`Error::Dimension`] from format arguments.
macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
