use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the calibration pipeline.
#[derive(Debug, Error)]
pub enum SdmError {
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("record {id}: embedding has length {found}, expected {expected}")]
    DimensionMismatch {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("record {id}: label {label} is out of range for {classes} classes")]
    LabelOutOfRange {
        id: String,
        label: usize,
        classes: usize,
    },

    #[error("record {id}: embedding contains a non-finite value")]
    NonFinite { id: String },

    #[error("duplicate id {id} in {split} split")]
    DuplicateId { id: String, split: String },

    #[error("{split} split is imbalanced beyond tolerance {tolerance}: counts {counts:?}")]
    Imbalanced {
        split: String,
        counts: Vec<usize>,
        tolerance: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss {loss} at epoch {epoch}: {context}")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        context: String,
    },

    #[error("archive error: {0}")]
    Archive(String),

    #[error("checksum mismatch for {file}: manifest {expected}, computed {found}")]
    Checksum {
        file: String,
        expected: String,
        found: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = SdmError> = std::result::Result<T, E>;
