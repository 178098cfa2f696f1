use thiserror::Error;

use crate::grassmann::CgReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("need at least two snapshots, got {columns}")]
    InsufficientSnapshots { columns: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("rank error: {0}")]
    Rank(String),

    #[error("inputs are not sufficiently exciting: cond(UU^T) = {condition:.3e}")]
    InputRank { condition: f64 },

    #[error("projected state Gram is singular: cond = {condition:.3e}")]
    ProjectedRank { condition: f64 },

    #[error("direction is not horizontal at the base point: |L^T H| / |H| = {ratio:.3e}")]
    Tangency { ratio: f64 },

    #[error("search direction is not a descent direction: slope = {slope:.3e}")]
    NotDescent { slope: f64 },

    #[error("line search found no sufficient decrease after {backtracks} backtracks")]
    LineSearch { backtracks: usize },

    #[error("optimizer stalled after {} iterations", report.iterations)]
    Stalled { report: Box<CgReport> },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("time step {dt} s exceeds the explicit stability limit {limit:.4e} s")]
    Stability { dt: f64, limit: f64 },

    #[error("non-finite state detected at step {step}")]
    NonFiniteState { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
