use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at batch index {index}")]
    NonFiniteLoss { index: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("decode error: {0}")]
    Decode(String),

    #[error("invalid maze layout: {0}")]
    InvalidLayout(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("covariance is not positive definite (component {component})")]
    NotPositiveDefinite { component: usize },

    #[error("training failed at step {step}: {source}")]
    Training { step: usize, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Training {
            step,
            source: Box::new(self),
        }
    }
}

pub(crate) fn ensure_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}
