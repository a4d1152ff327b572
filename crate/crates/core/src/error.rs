use thiserror::Error;

use crate::atlas::HoleIdx;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown hole `{0}`")]
    UnknownHole(String),

    #[error("unknown patch `{0}`")]
    UnknownPatch(String),

    #[error("invalid CTF value {0}: must be finite and > 0")]
    InvalidCtf(f64),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("hole {0} was already visited")]
    IllegalAction(HoleIdx),

    #[error("visiting hole {hole} costs {cost} min but only {remaining} min remain")]
    BudgetExceeded {
        hole: HoleIdx,
        cost: f64,
        remaining: f64,
    },

    #[error("cost penalty undefined for t = {t} < t0 = {t0}")]
    PenaltyDomain { t: f64, t0: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("generation failed: {0}")]
    Generation(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("model format: {0}")]
    ModelFormat(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("no candidate actions")]
    EmptyCandidates,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
