use std::path::PathBuf;

use diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch for {what}: expected {expected:?}, got {actual:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("{requested} vertices cannot cover every bone (need at least {minimum})")]
    TooFewVertices { requested: usize, minimum: usize },
    #[error("sequence needs at least {minimum} frames, got {actual}")]
    TooFewFrames { minimum: usize, actual: usize },
    #[error("heatmap {index} is not normalized (sum {sum})")]
    NotNormalized { index: usize, sum: f64 },
    #[error("joint {joint} projects outside the frame")]
    OutOfFrame { joint: usize },
    #[error("invalid permutation: {0}")]
    InvalidPermutation(String),
    #[error("every loss term is masked; nothing to supervise")]
    NoSupervision,
    #[error("procrustes alignment failed: {0}")]
    AlignmentFailed(String),
    #[error("entry `{name}`: {reason}")]
    Container { name: String, reason: String },
    #[error("checksum mismatch for entry `{0}`")]
    Checksum(String),
    #[error("config: {0}")]
    Config(String),
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("unknown gradient-check op `{0}`")]
    UnknownOp(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
