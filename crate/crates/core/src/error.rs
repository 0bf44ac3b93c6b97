use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("unphysical state: {0}")]
    Unphysical(String),

    #[error("truncation failure: deficit {deficit:.3e} exceeds {limit:.1e}")]
    Truncation { deficit: f64, limit: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("probability mass {mass:.6} outside the sampling grid exceeds {limit:.1e}")]
    GridMass { mass: f64, limit: f64 },

    #[error("degenerate eigenproblem: {0}")]
    Degenerate(String),

    #[error("did not converge: {0}")]
    NonConvergence(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
        manifest: Vec<String>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn param(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }

    /// True for failures of the numerics (non-convergence, degeneracy,
    /// truncation) as opposed to invalid input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Truncation { .. }
            | Error::GridMass { .. }
            | Error::Degenerate(_)
            | Error::NonConvergence(_) => true,
            Error::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
