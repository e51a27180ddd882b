use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("invalid parent array: {0}")]
    InvalidParents(String),
    #[error("edge index {index} out of range 1..={m}")]
    EdgeOutOfRange { index: usize, m: usize },
    #[error("no rows to invert: every edge is in the active set")]
    NoRowsToInvert,
    #[error("active set is not admissible")]
    Inadmissible,
    #[error("normalized inverse scaling factor is zero")]
    ZeroGamma,
    #[error("hypothesis violated: {0}")]
    Hypothesis(String),
    #[error("compatibility search: denominator never positive")]
    DenominatorNeverPositive,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no admissible S at these parameters: {0}")]
    NoAdmissibleSet(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
