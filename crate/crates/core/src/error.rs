use thiserror::Error;

pub type Result<T, E = ImaeError> = std::result::Result<T, E>;

/// Coarse error category, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum ImaeError {
    #[error("config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("data: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl ImaeError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ImaeError::Config(_) | ImaeError::Index(_) => ErrorKind::Config,
            ImaeError::Numeric(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

pub(crate) fn shape_err(msg: impl Into<String>) -> ImaeError {
    ImaeError::Shape(msg.into())
}
