use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unreadable file {path}: {reason}")]
    UnreadableFile { path: PathBuf, reason: String },

    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("empty signal")]
    EmptySignal,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("negative magnitude at ({row}, {col})")]
    NegativeMagnitude { row: usize, col: usize },

    #[error("cannot normalize: {0}")]
    ZeroScale(&'static str),

    #[error("overlap-add normalizer {value:e} below threshold at sample {index}")]
    ReconstructionFailure { index: usize, value: f64 },

    #[error("missing target for layer {0}")]
    MissingLayer(String),

    #[error("optimizer aborted at iteration {iteration}: {reason}")]
    Diverged { iteration: usize, reason: String },

    #[error("weight file: {0}")]
    WeightFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),
}
