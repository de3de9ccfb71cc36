use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    Dims(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("repetition map is not contracting (|A| = {0})")]
    NonContracting(f64),
    #[error("empty dictionary after T2 < T1 filtering")]
    EmptyDictionary,
    #[error("insufficient supported locations: need {need}, have {have}")]
    InsufficientSupport { need: usize, have: usize },
    #[error("sampling ratio {ratio} is infeasible (floor {floor})")]
    InfeasibleRatio { ratio: f64, floor: f64 },
    #[error("mask for block {block} has {count} lines, capacity is {capacity}")]
    ScheduleOverflow { block: usize, count: usize, capacity: usize },
    #[error("mask for contrast {0} samples outside the acquisition support")]
    MaskOutsideSupport(usize),
    #[error("unknown ordering strategy `{0}`")]
    UnknownOrdering(String),
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("region {0} has no valid voxels")]
    EmptyRegion(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
