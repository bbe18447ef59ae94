use thiserror::Error;

/// Errors surfaced by the detection pipeline.
#[derive(Debug, Error)]
pub enum BlcError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("zero-norm vector: {0}")]
    ZeroNorm(String),

    #[error("duplicate entry: {0}")]
    DuplicateEntry(String),

    #[error("unknown class: {0}")]
    UnknownClass(String),

    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimMismatch {
        expected: usize,
        got: usize,
        context: String,
    },

    #[error("shape mismatch between {left} {left_shape:?} and {right} {right_shape:?}")]
    ShapeMismatch {
        left: String,
        left_shape: Vec<usize>,
        right: String,
        right_shape: Vec<usize>,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("invalid box: x1={x1}, y1={y1}, x2={x2}, y2={y2}")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid label {label} for {k} classes")]
    InvalidLabel { label: usize, k: usize },

    #[error("undefined recall: no ground-truth boxes")]
    UndefinedRecall,

    #[error("harmonic mean undefined: both operands are zero")]
    UndefinedHarmonicMean,

    #[error("training diverged at iteration {iteration}: {msg}")]
    Divergence { iteration: usize, msg: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, BlcError>;

impl BlcError {
    /// Shape-mismatch helper naming the offending operand pair.
    pub fn shapes(left: &str, ls: &[usize], right: &str, rs: &[usize]) -> Self {
        BlcError::ShapeMismatch {
            left: left.to_string(),
            left_shape: ls.to_vec(),
            right: right.to_string(),
            right_shape: rs.to_vec(),
        }
    }
}
