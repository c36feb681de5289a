use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("joint {joint} value {value:.6} rad outside limits [{lo:.6}, {hi:.6}]")]
    JointLimit { joint: usize, value: f64, lo: f64, hi: f64 },

    #[error("invalid arm model: {0}")]
    InvalidArm(String),

    #[error("expected {expected} entries, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("task generation failed: {0}")]
    Generation(String),

    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },

    #[error("planner precondition violated: {0}")]
    PlannerPrecondition(String),

    #[error("planner found no path within {iterations} iterations")]
    PlanFailed { iterations: usize },

    #[error("environment misuse: {0}")]
    Usage(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
