use thiserror::Error;

use crate::data::ValidationReport;

pub type Result<T> = std::result::Result<T, MamError>;

#[derive(Debug, Error)]
pub enum MamError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("no observations")]
    NoObservations,

    #[error("invalid model or data:\n{0}")]
    Validation(ValidationReport),

    #[error("basis construction failed: {0}")]
    Basis(String),

    #[error("non-finite linear predictor at row {row}")]
    NonFinite { row: usize },

    #[error("matrix not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("inner Newton iteration did not converge after {iterations} iterations (gradient max-norm {gradient_norm:e})")]
    InnerNotConverged { iterations: usize, gradient_norm: f64 },

    #[error("outer optimisation did not converge after {evaluations} evaluations; last objective values: {trace:?}")]
    OuterNotConverged { evaluations: usize, trace: Vec<f64> },

    #[error("marginal basis is rank deficient (offending term: {term})")]
    RankDeficient { term: String },

    #[error("unsupported random-effect dimension {0} (supported: 1..=3)")]
    UnsupportedDimension(usize),

    #[error("root bracketing failed: {0}")]
    Bracket(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl MamError {
    /// True for failures of the numerical pipeline, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            MamError::NonFinite { .. }
                | MamError::NotPositiveDefinite(_)
                | MamError::InnerNotConverged { .. }
                | MamError::OuterNotConverged { .. }
                | MamError::RankDeficient { .. }
                | MamError::Bracket(_)
        )
    }
}
