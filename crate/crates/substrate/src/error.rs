use thiserror::Error;

#[derive(Debug, Error)]
pub enum SubstrateError {
    #[error("shape error at node `{node}`: {detail}")]
    Shape { node: String, detail: String },

    #[error("non-finite value produced by node `{node}`")]
    Numeric { node: String },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("input `{0}` is not bound")]
    UnboundInput(String),

    #[error("parameter `{0}` is missing")]
    MissingParam(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("checkpoint format error at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SubstrateError>;
