use comen_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("domain id {id} out of range for {count} domains")]
    DomainOutOfRange { id: usize, count: usize },
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("empty spatial extent")]
    EmptySpatialExtent,
    #[error("training-mode normalization needs at least 2 samples, got {0}")]
    InsufficientBatch(usize),
    #[error("k-means left a cluster empty after {0} re-seeds")]
    EmptyCluster(usize),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite {what} ({value}) at epoch {epoch}")]
    Divergence {
        what: &'static str,
        value: f64,
        epoch: usize,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
