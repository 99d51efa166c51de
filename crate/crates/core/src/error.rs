use alloc::string::String;

/// Errors raised by validation and by the conformal / audit operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),

    #[error("probability {value} at class {class} is outside [0, 1]")]
    ProbabilityOutOfRange { class: usize, value: f64 },

    #[error("probabilities sum to {sum}, outside tolerance 1e-6 of 1")]
    ProbabilitySum { sum: f64 },

    #[error("label {label} out of range for {k} classes")]
    LabelOutOfRange { label: usize, k: usize },

    #[error("record {id} has {found} classes, expected {expected}")]
    InconsistentClassCount {
        id: String,
        expected: usize,
        found: usize,
    },

    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),

    #[error("class {0} has no superclass in the taxonomy")]
    MissingSuperclass(usize),

    #[error("calibration size {size} must be in (0, {len})")]
    InvalidSplitSize { size: usize, len: usize },

    #[error("class {class} has positive weight but no records")]
    EmptyWeightedClass { class: usize },

    #[error("invalid class weights: {0}")]
    InvalidWeights(String),

    #[error("alpha {0} must lie in (0, 1)")]
    InvalidAlpha(f64),

    #[error("delta {0} must lie in (0, 1)")]
    InvalidDelta(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite conformity score at position {0}")]
    NonFiniteScore(usize),

    #[error("{scores} scores but {weights} weights")]
    LengthMismatch { scores: usize, weights: usize },

    #[error("weight {value} at position {index} is not positive")]
    NonPositiveWeight { index: usize, value: f64 },

    #[error("partition cell {0} has no calibration records")]
    EmptyCell(String),

    #[error("record {0} lacks the partition attribute")]
    MissingGroup(String),

    #[error("missing partition key for Mondrian calibration")]
    MissingPartitionKey,

    #[error("partition key {0} was not seen during calibration")]
    UnknownPartitionKey(String),

    #[error("prediction sets are misaligned with the dataset: {0}")]
    Misaligned(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid shift: {0}")]
    InvalidShift(String),

    #[error("shifted pool has {available} records, need more than {needed} for recalibration")]
    InsufficientShiftedData { available: usize, needed: usize },

    #[error("invalid binomial counts: {correct} of {n}")]
    InvalidCounts { correct: usize, n: usize },

    #[error("target accuracy required for threshold certification")]
    MissingTarget,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
