use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("empty input to {0}")]
    EmptyInput(&'static str),

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("reference tensor has zero norm")]
    DegenerateNorm,

    #[error("unsupported bitwidth {0} (supported range is 1..=8)")]
    UnsupportedBitwidth(usize),

    #[error("invalid bit distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}
