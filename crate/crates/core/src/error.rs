use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: output size ({extent} + 2*{pad} - {kernel}) / {stride} + 1 is not a positive integer")]
    NonIntegralOutput {
        op: &'static str,
        extent: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },

    #[error("{op}: invalid argument, {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("variable does not belong to this tape")]
    NotOnTape,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("layer index {index} out of range (network has {len} layers)")]
    LayerOutOfRange { index: usize, len: usize },

    #[error("layer {0} is not a convolution")]
    NotConv(usize),

    #[error("channel mask for layer {0} retains no channels")]
    EmptyMask(usize),

    #[error("channel mask for layer {layer} has length {found}, layer has {expected} output channels")]
    MaskLength {
        layer: usize,
        expected: usize,
        found: usize,
    },

    #[error("model file: bad magic bytes")]
    BadMagic,

    #[error("model file: unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("model file: truncated")]
    Truncated,

    #[error("model file: checksum failure (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },

    #[error("model file: {0}")]
    Corrupt(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("dataset: {0}")]
    Data(String),

    #[error("evaluation split is empty")]
    EmptySplit,

    #[error("config: {0}")]
    Config(String),

    #[error("baseline network is not marked as trained")]
    Untrained,

    #[error("network has no prunable convolution layers")]
    NoPrunableLayers,

    #[error("at least one loss term must be enabled")]
    NoLossEnabled,

    #[error("{stage} diverged: loss {loss:.6e} exceeds {factor}x its initial value {initial:.6e}")]
    Diverged {
        stage: String,
        loss: f64,
        initial: f64,
        factor: f64,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
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
