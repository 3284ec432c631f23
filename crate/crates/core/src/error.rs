use aod_substrate::SubstrateError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AodError {
    #[error(transparent)]
    Substrate(#[from] SubstrateError),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("slot {slot}: {detail}")]
    Decode { slot: usize, detail: String },

    #[error("cannot encode spec: {0}")]
    Encode(String),

    #[error("cannot build layer {layer}: {detail}")]
    Build { layer: usize, detail: String },

    #[error("non-finite {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AodError>;
