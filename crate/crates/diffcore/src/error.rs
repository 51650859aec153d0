use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape {shape:?} describes {expected} elements but {actual} were given")]
    ShapeData {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by `{op}` (node {node})")]
    NonFinite { op: &'static str, node: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("parameter `{0}` is already registered")]
    DuplicateParam(String),
    #[error("parameter `{name}` expects shape {expected:?}, got {actual:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
}
