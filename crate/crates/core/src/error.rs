use alloc::string::String;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AmesError {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape { what: &'static str, expected: usize, got: usize },

    #[error("attention row {0} has no unmasked column")]
    FullyMaskedRow(usize),

    #[error("descriptor set must contain at least one descriptor")]
    EmptyDescriptorSet,

    #[error("invalid configuration: {0}")]
    Config(&'static str),

    #[error("length {got} outside [{min}, {max}]")]
    LengthOutOfRange { got: usize, min: usize, max: usize },

    #[error("index {index} outside range of {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("rank deficient input: {0}")]
    RankDeficient(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("encoding mismatch: {0}")]
    Encoding(&'static str),
}

pub type Result<T> = core::result::Result<T, AmesError>;
