use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: weight expects {expected} input channels, input has {actual}")]
    ChannelMismatch {
        op: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: window {window} larger than input extent {extent}")]
    WindowTooLarge {
        op: &'static str,
        window: usize,
        extent: usize,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("backward root does not depend on any tensor requiring gradients")]
    Detached,

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("input lies within {margin:e} of a non-differentiable point")]
    NearKink { margin: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid network config: {0}")]
    InvalidConfig(String),

    #[error("ground truth must be binary (found value {0})")]
    NonBinaryGroundTruth(f64),

    #[error("ground truth has no foreground pixels")]
    EmptyGroundTruth,

    #[error("stage-2 training requires a difference mask for every sample ({0} has none)")]
    MissingMask(String),

    #[error("no prediction found for {0}")]
    MissingPrediction(String),

    #[error("{path}:{line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint config does not match the model config")]
    ConfigMismatch,

    #[error("checkpoint is truncated")]
    Truncated,

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
