use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The CLI maps [`GlamError::Numeric`] to exit code 2 and everything else to 1.
#[derive(Debug, Error)]
pub enum GlamError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl GlamError {
    pub fn is_numeric(&self) -> bool {
        matches!(self, GlamError::Numeric(_))
    }
}

pub type Result<T> = std::result::Result<T, GlamError>;

macro_rules! bail {
    ($kind:ident, $($arg:tt)*) => {
        return Err($crate::error::GlamError::$kind(format!($($arg)*)))
    };
}
pub(crate) use bail;
