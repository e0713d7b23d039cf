use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {layer}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("expected {expected} masks (one per maskable layer), got {actual}")]
    MaskCount { expected: usize, actual: usize },

    #[error("layer {0} is empty")]
    EmptyLayer(usize),

    #[error("non-binary mask value {value} in task {task}, layer {layer}, element {index}")]
    NonBinary {
        task: usize,
        layer: usize,
        index: usize,
        value: u8,
    },

    #[error("task id {task} out of range (bank holds {count} tasks)")]
    TaskOutOfRange { task: usize, count: usize },

    #[error("score gradient requested before any backward pass")]
    NoBackward,

    #[error("first maskable layer is not a convolution")]
    NoConvolution,

    #[error("cannot freeze the classifier head in the task-incremental scenario")]
    HeadFreezeRejected,

    #[error("tasks must be trained in order: expected task {expected}, got {actual}")]
    OutOfOrder { expected: usize, actual: usize },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("empty dataset for task {0}")]
    EmptyDataset(usize),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("unknown ablation toggle `{0}`")]
    UnknownToggle(String),

    #[error("accuracy matrix incomplete: {rows} rows for {tasks} tasks")]
    IncompleteMatrix { rows: usize, tasks: usize },

    #[error("not a mask container (bad magic)")]
    BadMagic,

    #[error("unsupported container version {0}")]
    UnsupportedVersion(u16),

    #[error("truncated container")]
    Truncated,

    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),

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

    /// Stable numeric code, used by the CLI as its process exit status.
    pub fn code(&self) -> i32 {
        match self {
            Error::BadMagic => 10,
            Error::UnsupportedVersion(_) => 11,
            Error::Truncated => 12,
            Error::Corrupt(_) => 13,
            Error::UnknownKey(_) | Error::Config(_) | Error::UnknownToggle(_) => 2,
            Error::Mismatch(_) => 3,
            Error::TaskOutOfRange { .. } => 4,
            Error::Io { .. } => 5,
            _ => 1,
        }
    }
}
