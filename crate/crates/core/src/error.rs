use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: kernel length {kernel} exceeds input length {len}")]
    KernelTooLong {
        op: &'static str,
        kernel: usize,
        len: usize,
    },
    #[error("{op}: empty input tensor")]
    EmptyTensor { op: &'static str },
    #[error("{op}: value {value} is outside the domain")]
    Domain { op: &'static str, value: f64 },
    #[error("{op}: NaN in input")]
    NanInput { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    Rank { shape: Vec<usize> },
    #[error("{path}:{line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("unknown class label {label:?}")]
    UnknownLabel { label: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("series length {len} is not divisible by {multiple}")]
    Partition { len: usize, multiple: usize },
    #[error("tree depth must be at least 1")]
    DegenerateTree,
    #[error("cannot transfer parameters: {0}")]
    Transfer(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("numeric abort: {0}")]
    NumericAbort(String),
    #[error("cannot explain: {0}")]
    Explain(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
