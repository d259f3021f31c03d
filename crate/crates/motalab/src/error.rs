//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI maps them to exit codes:
//! configuration problems exit 1, runtime failures exit 2, and invariant
//! violations (including data-access violations by a sequential strategy)
//! exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),

    /// Invalid argument to an operation (bad shapes are reported as `Shape`).
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Mismatched tensor/network shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation called in a state it does not accept.
    #[error("invalid state: {0}")]
    State(String),

    /// Index out of range.
    #[error("index error: {0}")]
    Index(String),

    /// An accuracy matrix is missing entries required by a metric.
    #[error("incomplete accuracy matrix: {0}")]
    IncompleteMatrix(String),

    /// Snapshot set does not span two principal directions.
    #[error("degenerate trajectory: {0}")]
    DegenerateTrajectory(String),

    /// A sequential strategy touched data of a task other than the current one.
    #[error("data-access violation: {0}")]
    DataAccess(String),

    /// A declared invariant failed at runtime.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Comparison refused (e.g. capacity mismatch beyond tolerance).
    #[error("comparison refused: {0}")]
    Refused(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 config, 2 runtime, 3 invariant violation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Invariant(_) | Error::DataAccess(_) => 3,
            _ => 2,
        }
    }
}
