use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("gram matrix is singular even after jitter")]
    Singular,

    #[error("all regression weights are zero")]
    DegenerateWeights,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("expected episode index {expected}, got {got}")]
    Sequencing { expected: usize, got: usize },

    #[error("corrupt trajectory data: {0}")]
    DataCorruption(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("episode logs are not aligned: {0}")]
    Alignment(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
