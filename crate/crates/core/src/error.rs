use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid dimensions: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("structural error: {0}")]
    Structure(String),
    #[error("encode error: {0}")]
    Encode(String),
    #[error("decode error: {0}")]
    Decode(String),
    #[error("unsupported bitstream version {found} (expected {expected})")]
    Version { found: u8, expected: u8 },
    #[error("bitstream format error: {0}")]
    Format(String),
    #[error("model/config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite training state: {0}")]
    NonFinite(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("dataset ingestion error: {0}")]
    Ingest(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
