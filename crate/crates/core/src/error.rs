//! Crate-wide error type.

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A config or input violated a documented invariant.
    #[error("validation: {0}")]
    Validation(String),

    /// Tensor or matrix shapes do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A mini-batch broke the PK sampler contract required by the triplet loss.
    #[error("sampler contract: {0}")]
    SamplerContract(String),

    /// An input kind the operation does not support.
    #[error("unsupported input: {0}")]
    Unsupported(String),

    /// A binary file or manifest failed to parse.
    #[error("format: {0}")]
    Format(String),

    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
