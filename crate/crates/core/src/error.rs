use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// The frame sequence is too short for the target under CTC topology.
    #[error("infeasible CTC alignment: {frames} frames, at least {required} required")]
    InfeasibleLength { frames: usize, required: usize },

    #[error("enumeration budget exceeded: {0} paths")]
    Budget(u128),

    #[error("{path}:{line}: {msg}")]
    Manifest { path: PathBuf, line: usize, msg: String },

    #[error("split leakage: {0}")]
    Leakage(String),

    #[error("cannot resolve image {0}")]
    MissingImage(PathBuf),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("symbol table mismatch: expected {expected}, found {found}")]
    SymbolMismatch { expected: String, found: String },

    #[error("CNN layer {layer} differs: {detail}")]
    CnnMismatch { layer: usize, detail: String },

    #[error("training: {0}")]
    Training(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
