use thiserror::Error;

/// Error type shared by all stages of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("degenerate point configuration: {0}")]
    Degenerate(String),
    #[error("registration failure: {0}")]
    RegistrationFailure(String),
    #[error("matrix is not a similarity transform: {0}")]
    NotSimilarity(String),
    #[error("solver failed: {0}")]
    Solver(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn parse(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
