use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),
    /// A run configuration or registry lookup is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),
    /// An external metric returned something unusable.
    #[error("metric adapter error: {0}")]
    Adapter(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite {what} at step {step} (batch sample ids: {sample_ids:?})")]
    NonFinite {
        what: String,
        step: u64,
        sample_ids: Vec<String>,
    },
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    SafeTensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by bad user input rather than runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_) | Error::Config(_) | Error::Checkpoint(_))
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Validation(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
