//! Error type shared by every module of the engine.

use std::path::PathBuf;

use thiserror::Error;

use crate::au::ActionUnit;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("model parse error: {0}")]
    Parse(String),

    #[error("unsupported model format version {found} (expected {expected})")]
    UnsupportedVersion { found: i64, expected: i64 },

    #[error("unknown layer kind {kind:?} at layer {index}")]
    UnknownLayerKind { index: usize, kind: String },

    #[error("weight length mismatch at layer {layer} ({field}): shape {shape:?} needs {expected} values, found {found}")]
    WeightLength {
        layer: usize,
        field: String,
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },

    #[error("shape chain violation at layer {layer}: {reason}")]
    ShapeChain { layer: usize, reason: String },

    #[error("golden self-check failed: output {index} expected {expected}, got {actual}")]
    GoldenMismatch {
        index: usize,
        expected: f32,
        actual: f32,
    },

    #[error("unknown action unit {0}")]
    UnknownAu(String),

    #[error("activation trace does not belong to this model: {0}")]
    TraceMismatch(String),

    #[error("expected 68 landmarks, found {0}")]
    LandmarkCount(usize),

    #[error("landmark {index} has a non-finite coordinate")]
    NonFiniteLandmark { index: usize },

    #[error("no landmark lies inside the {height}x{width} image")]
    LandmarksOutOfImage { height: usize, width: usize },

    #[error("degenerate bounding box for {au}: landmarks {landmarks:?} give an empty region after clipping")]
    DegenerateBox {
        au: ActionUnit,
        landmarks: Vec<[f32; 2]>,
    },

    #[error("image {path}: {reason}")]
    Image { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
