use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("category probabilities must sum to 1 (got p_e + p_h + p_b = {sum})")]
    ProbabilitySumError { sum: f64 },

    #[error("dimension d = {d} is too small; need at least {min}")]
    DimensionTooSmall { d: usize, min: usize },

    #[error("`{name}` must be positive and finite (got {value})")]
    NonPositiveScale { name: &'static str, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("Gram-Schmidt hit a residual below 1e-12 on {attempts} consecutive draws")]
    DegenerateDraw { attempts: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("the optimal strong construction needs m >= 2 (got m = {m})")]
    MTooSmall { m: usize },

    #[error("dataset has no pseudo-labels; run pseudo-labeling first")]
    MissingPseudoLabels,

    #[error("decomposition tracker mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("schema error: {0}")]
    SchemaError(String),

    #[error("malformed artifact {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("stage `{0}` is already complete; pass --force to overwrite")]
    StageComplete(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("config parse error: {0}")]
    ConfigParse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Errors caused by bad user input (config values, CLI usage) rather than
    /// by the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ProbabilitySumError { .. }
                | Error::DimensionTooSmall { .. }
                | Error::NonPositiveScale { .. }
                | Error::InvalidConfig(_)
                | Error::MTooSmall { .. }
                | Error::ConfigParse(_)
                | Error::StageComplete(_)
        )
    }
}
