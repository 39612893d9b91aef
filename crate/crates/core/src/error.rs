use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("empty sequence passed to {op}")]
    EmptySequence { op: &'static str },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("graph already consumed by a backward pass")]
    StaleGraph,
    #[error("variable does not belong to this graph")]
    ForeignVar,
    #[error("target of length {target_len} with {repeats} repeats is infeasible for {frames} frames")]
    InfeasibleTarget {
        target_len: usize,
        repeats: usize,
        frames: usize,
    },
    #[error("sequence of {len} frames exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("duplicate parameter path {0}")]
    DuplicateParam(String),
    #[error("unknown parameter path {0}")]
    UnknownParam(String),
    #[error("cohort has zero variance")]
    DegenerateCohort,
    #[error("trial set needs both target and non-target trials")]
    SingleClassTrials,
    #[error("class {0} is absent from the gold labels")]
    MissingClass(usize),
    #[error("empty reference sequence")]
    EmptyReference,
    #[error("length mismatch: {0} predictions vs {1} gold labels")]
    LengthMismatch(usize, usize),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("strategy {0} has no layer weights")]
    NoLayerWeights(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
