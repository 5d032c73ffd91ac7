use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate corner configuration (condition number {condition:.3e})")]
    DegenerateCorners { condition: f64 },
    #[error("scale factors must be positive, got ({0}, {1})")]
    NonPositiveScale(f64, f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input of {width}x{height} is not divisible by {divisor}")]
    IndivisibleInput {
        width: usize,
        height: usize,
        divisor: usize,
    },
    #[error("edge extraction expects a single-channel image, got {0} channels")]
    MultiChannelInput(usize),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("displaced patch leaves the {width}x{height} source: {detail}")]
    PatchOutOfBounds {
        width: usize,
        height: usize,
        detail: String,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("corrupt manifest {path}: {detail}")]
    CorruptManifest { path: PathBuf, detail: String },
    #[error("record {record}: missing image {path}")]
    MissingImage { record: String, path: PathBuf },
    #[error("dataset is empty")]
    DatasetEmpty,
    #[error("incompatible checkpoint: {0}")]
    CheckpointIncompatible(String),
    #[error("perceptual extractor unavailable: {0}")]
    ExtractorUnavailable(String),
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
