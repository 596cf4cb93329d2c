use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shapes do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// An argument is outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// Batch normalization cannot run in train mode on a batch of one.
    #[error("degenerate batch: batch normalization needs at least 2 samples in train mode, got {0}")]
    DegenerateBatch(usize),

    /// Latent dimension of two modules disagrees.
    #[error("latent dimension mismatch: expected {expected}, got {got}")]
    LatentDim { expected: usize, got: usize },

    /// A sharing protocol refers to a block the classifier does not have.
    #[error("structure error: {0}")]
    Structure(String),

    /// A binary container is malformed. `offset` is the byte position at
    /// which the problem was detected.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },

    /// A data set is empty or otherwise unusable.
    #[error("data error: {0}")]
    Data(String),

    /// A generation or run configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A NaN or infinity surfaced during computation.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub fn format(offset: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }
}
