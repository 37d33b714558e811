use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {context}: {lhs:?} vs {rhs:?}")]
    Dimension {
        context: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("run diverged at step {step}: {message}")]
    Run { step: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
