use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("sequence of length {len} exceeds capacity {max}")]
    Capacity { len: usize, max: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("checkpoint format: {0}")]
    Format(#[from] FormatError),

    #[error("configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Reasons a checkpoint file is rejected.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes {0:?}")]
    BadMagic(Vec<u8>),
    #[error("file truncated: needed {needed} bytes at offset {offset}, have {available}")]
    Truncated {
        offset: u64,
        needed: u64,
        available: u64,
    },
    #[error("header is not valid JSON: {0}")]
    Header(String),
    #[error("tensor {name}: declared {declared} bytes, shape {shape:?} needs {expected}")]
    TensorLength {
        name: String,
        shape: Vec<usize>,
        declared: u64,
        expected: u64,
    },
    #[error("tensor {name}: shape {found:?}, config implies {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("tensor {name}: dtype {found}, expected {expected}")]
    DtypeMismatch {
        name: String,
        found: String,
        expected: String,
    },
    #[error("tensor {0} missing from header")]
    MissingTensor(String),
    #[error("tensor {0} has offset not aligned to 64 bytes")]
    Misaligned(String),
    #[error("tensor {0} contains non-finite values")]
    NonFinite(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
