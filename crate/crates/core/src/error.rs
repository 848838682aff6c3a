use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRot6d(&'static str),
    #[error("rank-deficient rotation mean (singular values {0:?})")]
    RankDeficientMean([f64; 3]),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("point behind camera (depth {0})")]
    BehindCamera(f64),
    #[error("non-positive weak-perspective scale {0}")]
    NonPositiveScale(f64),
    #[error("degenerate ray bundle")]
    DegenerateRays,
    #[error("invalid size: {0}")]
    InvalidSize(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("need at least {need} views, got {got}")]
    TooFewViews { need: usize, got: usize },
    #[error("rank-deficient translation/scale system (rank {0})")]
    RankDeficientSystem(usize),
    #[error("non-positive global scale {0}")]
    NonPositiveGlobalScale(f64),
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown ablation suite `{0}`")]
    UnknownSuite(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("io: {0}")]
    Io(String),
    #[error("format: {0}")]
    Format(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_mismatch(expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
