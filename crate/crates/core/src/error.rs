use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("compute tape is not topologically ordered at node {0}")]
    Cycle(usize),

    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f32),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("input does not match the model input spec: {0}")]
    InputSpec(String),

    #[error("unknown dataset id {id} (expected 1..={max})")]
    UnknownDataset { id: usize, max: usize },

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

    #[error("no layer satisfies G_i > tau = {tau}; lower tau to extract learngene layers")]
    EmptyExtraction { tau: usize },

    #[error("target depth {target} is below the learngene layer count {count}")]
    DepthTooSmall { target: usize, count: usize },

    #[error("expansion plan references layer {0}, which is not in the learngene set")]
    MissingLearngeneLayer(usize),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("label {label} in {split} record {index} is out of range for {num_classes} classes")]
    LabelRange {
        split: &'static str,
        index: usize,
        label: i64,
        num_classes: usize,
    },

    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl Into<String>, got: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
