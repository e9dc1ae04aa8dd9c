use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unsupported primitive usage: {0}")]
    UnsupportedKind(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("function is not finite near the evaluation point")]
    NonFiniteFunction,
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("embedding dimension must be even, got {0}")]
    OddDim(usize),
    #[error("classification batch is empty")]
    EmptyLabeledBatch,
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("class index {index} out of range for {classes} classes")]
    BadClassIndex { index: usize, classes: usize },
    #[error("invalid timestep subsequence: {0}")]
    BadSubsequence(String),
    #[error("selection is empty")]
    EmptySelection,
    #[error("phantom geometry infeasible: {0}")]
    GeometryInfeasible(String),
    #[error("class prior {0} outside [0, 1]")]
    InvalidPrior(f64),
    #[error("AUC needs at least one positive and one negative label")]
    DegenerateLabels,
    #[error("no results to aggregate")]
    EmptyResults,
    #[error("item {item} has no bounding box for class {class}")]
    MissingBbox { item: usize, class: usize },
    #[error("need at least {needed} samples per set, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    TrainingDiverged { step: usize, loss: f64 },
    #[error("sampling trajectory became non-finite at t = {0}")]
    NonFiniteSample(usize),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
