//! Crate-wide error type.

use thiserror::Error;

/// Errors raised by memory, clustering, stream, model, and harness operations.
#[derive(Debug, Error)]
pub enum Error {
    /// `update_full_classes` was called before the buffer was filled.
    #[error("memory buffer is not filled (occupancy {occupancy} < capacity {capacity})")]
    NotFilled { occupancy: usize, capacity: usize },

    /// A slot id outside `[0, capacity)` was passed.
    #[error("slot {slot} out of range for capacity {capacity}")]
    SlotOutOfRange { slot: usize, capacity: usize },

    /// The addressed slot holds no instance.
    #[error("slot {slot} is unoccupied")]
    SlotUnoccupied { slot: usize },

    /// The buffer is already at capacity; use `replace` instead of `insert`.
    #[error("memory buffer is full (capacity {capacity})")]
    BufferFull { capacity: usize },

    /// Stage-2 eviction found no full class with in-memory members.
    #[error("no evictable full class (full-class marking invariant violated)")]
    NoFullClass,

    /// An oracle-mode policy observed an instance without a sub-label.
    #[error("instance {id} lacks a sub_label required by the oracle clusterer")]
    MissingSubLabel { id: u64 },

    /// Feature vector length differs from the expected dimensionality.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A cluster stream counter was addressed with an id the current clustering lacks.
    #[error("unknown cluster {cluster} for label {label}")]
    UnknownCluster { label: usize, cluster: usize },

    /// An IDX file begins with the wrong magic number.
    #[error("bad IDX magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        path: String,
        expected: u32,
        found: u32,
    },

    /// An IDX payload ends before the header-declared size.
    #[error("truncated IDX file {path}: needed {needed} bytes, got {got}")]
    Truncated {
        path: String,
        needed: usize,
        got: usize,
    },

    /// Image and label files declare different item counts.
    #[error("IDX count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    /// An operation that needs data received an empty dataset.
    #[error("dataset is empty")]
    EmptyDataset,

    /// A synthetic spec or retention/merge parameter is malformed.
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    /// A gradient or parameter became non-finite (training diverged).
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// A label lies outside the configured class count.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// Test data was produced under a different merge map than the model.
    #[error("merge map mismatch between training and test data")]
    MergeMapMismatch,

    /// Run configuration is invalid.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 config, 2 runtime/numeric, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidSpec(_) | Error::MissingSubLabel { .. } => 1,
            Error::Io(_) | Error::Json(_) | Error::Csv(_) => 3,
            Error::BadMagic { .. } | Error::Truncated { .. } | Error::CountMismatch { .. } => 3,
            _ => 2,
        }
    }
}
