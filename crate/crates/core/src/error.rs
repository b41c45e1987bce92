use std::path::PathBuf;

/// Errors raised anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("index {index} out of range for size {size} ({what})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("intervention at {site} expects shape {expected:?}, got {got:?}")]
    SiteShapeMismatch {
        site: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("could only produce {produced} of {requested} distinct fake triggers")]
    ExhaustedCandidates { requested: usize, produced: usize },

    #[error("training diverged at step {step}: loss {loss}")]
    DivergedLoss { step: usize, loss: f64 },

    #[error("trigger efficacy gate not passed: {0}")]
    GateNotPassed(String),

    #[error("example set is empty")]
    EmptyExampleSet,

    #[error("example {0} has no trigger span")]
    MissingTriggerSpan(u64),

    #[error("invalid examples: {0}")]
    InvalidExamples(String),

    #[error("k = {k} exceeds grid size {cells}")]
    KExceedsGridSize { k: usize, cells: usize },

    #[error("jaccard index undefined for two empty sets")]
    BothEmpty,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        LabError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
