use thiserror::Error;

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] hbnn_core::Error),

    #[error("shape error in {context}: {detail}")]
    Shape { context: String, detail: String },

    #[error("non-finite values produced by layer {layer}")]
    NumericFailure { layer: String },

    #[error("backward called without a forward cache for layer {0}")]
    MissingCache(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainError {
    pub(crate) fn shape(context: impl Into<String>, detail: impl Into<String>) -> Self {
        TrainError::Shape {
            context: context.into(),
            detail: detail.into(),
        }
    }
}
