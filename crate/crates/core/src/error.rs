// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use thiserror::Error;

/// Errors produced anywhere in the attribution pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward seed was not produced by this tape")]
    ForeignSeed,

    #[error("backward seed must be a scalar, got shape {0:?}")]
    NonScalarSeed(Vec<usize>),

    #[error("token id {token} at (example {row}, position {col}) is out of range for vocab size {vocab}")]
    TokenOutOfRange {
        row: usize,
        col: usize,
        token: usize,
        vocab: usize,
    },

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("missing cache entry for node {0}")]
    MissingCacheEntry(String),

    #[error("invalid metric: {0}")]
    InvalidMetric(String),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("degenerate task: clean and corrupted baselines are both {0}")]
    DegenerateTask(f64),

    #[error("graph mismatch: {0} vs {1}")]
    GraphMismatch(String, String),

    #[error("non-finite model output along the path at step {step}")]
    NonFinitePath { step: usize },

    #[error("empty integration path")]
    EmptyPath,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("circuit file: {0}")]
    CircuitFormat(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
