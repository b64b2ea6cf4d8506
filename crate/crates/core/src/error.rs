use thiserror::Error;

/// Errors shared by the tensor primitives and the attention kernels.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("axis {axis} out of range for rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid chunk size {0}: supported sizes are 1, 16, 32 and 64")]
    InvalidChunkSize(usize),

    #[error("chunkwise kernel requires mu > 0 everywhere (log mu finite); use the recurrent kernel for mu = 0")]
    MomentumVanished,

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad tensor file: {0}")]
    BadTensorFile(String),
}

pub type Result<T> = std::result::Result<T, Error>;
