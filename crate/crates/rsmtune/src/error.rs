//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("factor `{name}`: {reason}")]
    InvalidFactor { name: String, reason: String },

    #[error("invalid design: {0}")]
    InvalidDesign(String),

    #[error("invalid generators: {0}")]
    InvalidGenerators(String),

    #[error("rank-deficient model matrix; collinear columns: {}", columns.join(", "))]
    RankDeficient { columns: Vec<String> },

    #[error("underdetermined system: {rows} runs for {cols} model terms")]
    Underdetermined { rows: usize, cols: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("fitted first-order surface is flat (all linear coefficients zero); no descent direction")]
    ZeroGradient,

    #[error("config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("unknown run id {0} (not pending in this campaign)")]
    UnknownRunId(u64),

    #[error("run {0}: loss is not finite")]
    NonFiniteLoss(u64),

    #[error("run {run_id} already recorded with loss {existing}; refusing conflicting resubmission {resubmitted}")]
    ConflictingResult {
        run_id: u64,
        existing: f64,
        resubmitted: f64,
    },

    #[error("command `{command}` is not valid in phase {phase}: {reason}")]
    PhaseError {
        command: String,
        phase: String,
        reason: String,
    },

    #[error("objective evaluation failed for run {run_id}: {detail}")]
    EvaluationFailed { run_id: u64, detail: String },

    #[error("invalid deviance sample: {0}")]
    InvalidSample(String),

    #[error("degenerate quadratic surface: {0}")]
    DegenerateSurface(String),

    #[error("ledger {path}, line {line}: {reason}")]
    Ledger {
        path: String,
        line: usize,
        reason: String,
    },

    #[error("campaign directory is locked by another process: {0}")]
    Locked(String),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
