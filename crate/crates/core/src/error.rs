use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("case {case_id}: missing required modality {modality}")]
    MissingModality { case_id: String, modality: String },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("corrupt volume {path}: {reason}")]
    CorruptVolume { path: PathBuf, reason: String },

    #[error("invalid label id {id} (allowed {allowed})")]
    InvalidLabel { id: u8, allowed: &'static str },

    #[error("volume has no nonzero (brain) voxels")]
    EmptyBrain,

    #[error("crop {crop:?} larger than source {source_shape:?}")]
    CropTooLarge {
        crop: [usize; 3],
        source_shape: [usize; 3],
    },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("missing model: {0}")]
    MissingModel(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("{failed} of {total} cases failed: {details}")]
    CaseFailures {
        failed: usize,
        total: usize,
        details: String,
    },

    #[error("checkpoint format: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Nifti(#[from] nifti::NiftiError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config parse: {0}")]
    Toml(String),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
