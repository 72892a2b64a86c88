//! Embedding files, dataset manifests, task schedules, and the synthetic
//! Gaussian-cluster generator.

mod format;
mod manifest;
mod schedule;
mod synthetic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{
    read_embedding_stream, record_len, write_embedding_file, EmbeddingReader, FileHeader, FORMAT_VERSION,
    HEADER_LEN, MAGIC,
};
pub use manifest::{Dataset, DatasetManifest, Split, SplitTag};
pub use schedule::{build_task_schedule, TaskSchedule};
pub use synthetic::{generate_synthetic_tasks, SyntheticDataset, SyntheticSpec};

/// One embedding and its class label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub vector: Vec<f32>,
    pub label: u32,
}

impl EmbeddingRecord {
    pub fn new(vector: Vec<f32>, label: u32) -> Self {
        Self { vector, label }
    }
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("embedding dimension must be at least 1")]
    ZeroDimension,
    #[error("dimension mismatch at record {record}: expected {expected}, got {got}")]
    DimensionMismatch { record: u64, expected: usize, got: usize },
    #[error("label {label} at record {record} does not fit in i32")]
    LabelOverflow { record: u64, label: u32 },
    #[error("bad magic bytes {0:?}, expected \"OCLE\"")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("bad header: {0}")]
    BadHeader(String),
    #[error("truncated: expected {expected} got {got}")]
    Truncated { expected: u64, got: u64 },
    #[error("file truncated mid-record: record {record} starting at byte offset {offset} is incomplete")]
    TruncatedRecord { offset: u64, record: u64 },
    #[error("trailing bytes: expected file length {expected_len}, found {actual_len}")]
    TrailingBytes { expected_len: u64, actual_len: u64 },
    #[error("non-finite value in record {record}, component {component} (byte offset {offset})")]
    NonFinite { record: u64, component: usize, offset: u64 },
    #[error("negative label {label} in record {record}")]
    NegativeLabel { record: u64, label: i32 },
    #[error("record {record} has label {label} but the manifest declares {num_classes} classes")]
    LabelOutOfRange { record: u64, label: u32, num_classes: usize },
    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
    #[error("{num_classes} not divisible by {step_size}")]
    NotDivisible { num_classes: usize, step_size: usize },
    #[error("step size must be positive")]
    ZeroStepSize,
    #[error("invalid generator parameter: {0}")]
    InvalidParameter(String),
    #[error("manifest JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
