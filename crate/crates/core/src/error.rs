use numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn config_err(msg: impl Into<String>) -> CoreError {
    CoreError::Config(msg.into())
}

pub(crate) fn data_err(msg: impl Into<String>) -> CoreError {
    CoreError::Data(msg.into())
}

impl From<CoreError> for NumError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Num(n) => n,
            other => NumError::InvalidArgument(other.to_string()),
        }
    }
}
