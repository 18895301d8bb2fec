use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("angular measure has infinite mass on (0, pi] without a cutoff (epsilon = {epsilon})")]
    InfiniteMass { epsilon: f64 },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("model bound failure: {0}")]
    ModelBound(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
