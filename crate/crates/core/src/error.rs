use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("dimension error: {axis} = {size} is not divisible by patch size {patch}")]
    Dimension { axis: &'static str, size: usize, patch: usize },

    #[error("invalid configuration: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    TensorShape { name: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("truncated archive: {0}")]
    Truncated(String),

    #[error("malformed archive: {0}")]
    Archive(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("no valid frames to evaluate")]
    EmptyEvaluation,

    #[error("attribute schema {schema} expects {expected} flags, found {found}")]
    Schema { schema: String, expected: usize, found: usize },

    #[error("parse error in {path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
