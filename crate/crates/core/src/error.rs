use thiserror::Error;

/// Errors surfaced by tensor ops, encoders, losses and the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: output extent not exact: ({numer}) not divisible by stride {stride}")]
    InexactOutput {
        op: &'static str,
        numer: i64,
        stride: usize,
    },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward already ran on this tape")]
    BackwardRepeated,

    #[error("degenerate roi: ({x1}, {y1}) .. ({x2}, {y2})")]
    DegenerateRoi { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("{op}: empty batch")]
    EmptyBatch { op: &'static str },

    #[error("{op}: no positive samples")]
    NoPositives { op: &'static str },

    #[error("non-finite value in loss term `{term}`")]
    NonFiniteLoss { term: String },

    #[error("gaussian center ({row}, {col}) outside {h}x{w} heatmap")]
    CenterOutOfBounds {
        row: i64,
        col: i64,
        h: usize,
        w: usize,
    },

    #[error("grad check: non-finite probe value at coordinate {coord}")]
    NonFiniteProbe { coord: usize },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("tensor file: {0}")]
    TensorFile(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn domain(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Domain {
            op,
            detail: detail.into(),
        }
    }
}
