use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),

    #[error("shape mismatch for {}: expected {expected:?}, found {found:?}", path.display())]
    ShapeMismatch {
        path: PathBuf,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("age index {0} is outside the supported coding 0..=3")]
    BadAgeIndex(i64),

    #[error("slice index {index} out of range for a volume with {len} slices")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("failed to decode {}: {reason}", path.display())]
    Decode { path: PathBuf, reason: String },

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("mask is not binary: found value {0}")]
    NonBinaryMask(u8),

    #[error("volume {0} has no annotated slices")]
    NoAnnotatedSlices(String),

    #[error("crop {crop:?} does not fit in slice {slice:?}")]
    CropTooLarge {
        crop: (usize, usize),
        slice: (usize, usize),
    },

    #[error("invalid crop box: {0}")]
    InvalidBox(String),

    #[error("unknown age index {age} (model was built for {num_ages} ages)")]
    UnknownAge { age: usize, num_ages: usize },

    #[error("relative coordinate {0} is outside [0, 1]")]
    CoordOutOfRange(f64),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("bad specification: {0}")]
    BadSpec(String),

    #[error("model already carries conditioning modules")]
    AlreadyConditioned,

    #[error("no scores for age group {0}")]
    EmptyAgeGroup(usize),

    #[error("non-finite loss at step {step} (batch seed {batch_seed})")]
    NaNLoss { step: usize, batch_seed: u64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
