use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("cannot split width {width} into {parts} equal segments")]
    NotDivisible { width: usize, parts: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("non-finite loss while perturbing {param}[{row}, {col}]")]
    NonFiniteLoss {
        param: String,
        row: usize,
        col: usize,
    },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("trace is stale: recorded at generation {trace}, host is at generation {host}")]
    StaleTrace { trace: u64, host: u64 },

    #[error("layer index {index} out of range (host has {layers} layers)")]
    LayerOutOfRange { index: usize, layers: usize },

    #[error("layer {0} already has an adapter attached")]
    AlreadyAttached(usize),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("parse error at record {record}: {message}")]
    Parse { record: usize, message: String },

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u64, expected: u64 },

    #[error("checkpoint does not match model: {0}")]
    CheckpointMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    ) -> Self {
        Error::ShapeMismatch {
            op,
            left_rows: left.0,
            left_cols: left.1,
            right_rows: right.0,
            right_cols: right.1,
        }
    }
}
