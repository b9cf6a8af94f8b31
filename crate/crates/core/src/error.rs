use thiserror::Error;

/// Errors produced by tree combinatorics, model validation, inference and
/// estimation routines.
#[derive(Error, Debug)]
pub enum HmtError {
    #[error("the root vertex has no parent")]
    RootHasNoParent,

    #[error("spine of length >= {needed} required (got {got})")]
    SpineRequired { needed: usize, got: usize },

    #[error("block root at height {height} is misaligned for block size m = {m}")]
    BlockMisaligned { height: usize, m: usize },

    #[error("row {row} of the transition matrix sums to {sum}, expected 1")]
    NotStochastic { row: usize, sum: f64 },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("invalid root law: {0}")]
    InvalidRootLaw(String),

    #[error("mask vertex {0} is outside the sample or the anchored subtree")]
    MaskOutsideSample(String),

    #[error("method {method} unavailable: {reason}")]
    MethodUnavailable { method: String, reason: String },

    #[error("information matrix is numerically singular (condition number {cond:.3e})")]
    SingularInformation { cond: f64 },

    #[error("region contains vertices shallower than the neighborhood level {level}")]
    RegionTooShallow { level: usize },

    #[error("posterior-weighted variance underflowed for state {state} (floored at {floor:e})")]
    DegenerateVariance { state: usize, floor: f64 },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HmtError>;
