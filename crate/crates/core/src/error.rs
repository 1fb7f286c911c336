use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty side: {0}")]
    EmptySide(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFiniteValue(String),

    #[error("layer norm needs at least 2 channels, got {0}")]
    DegenerateWidth(usize),

    #[error("backward seed must be a 1x1 slot, got {0}x{1}")]
    NotScalar(usize, usize),

    #[error("ratio test needs at least 2 target points, got {0}")]
    TooFewTargets(usize),

    #[error("no anchor candidates")]
    NoCandidates,

    #[error("index out of bounds: {0}")]
    IndexOutOfBounds(String),

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("invalid warp: {0}")]
    InvalidWarp(String),

    #[error("ground truth has no correspondences")]
    EmptyGroundTruth,

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("file format: {0}")]
    FileFormat(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
