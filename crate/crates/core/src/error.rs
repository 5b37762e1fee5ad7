use std::path::PathBuf;

use thiserror::Error;

use crate::model::ModuleId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("matrix is not positive definite after damping ({0})")]
    NotPositiveDefinite(String),

    #[error("singular Hessian for {module}: {reason}")]
    SingularHessian { module: ModuleId, reason: String },

    #[error("singular inverse-Hessian submatrix for mask {mask:?}")]
    SingularSubmatrix { mask: Vec<usize> },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("checkpoint error in tensor `{tensor}`: {reason}")]
    Checkpoint { tensor: String, reason: String },

    #[error("database integrity error: {0}")]
    DatabaseIntegrity(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("constraint violated: {0}")]
    Constraint(String),

    #[error("no feasible level switch after {retries} retries")]
    InfeasibleMutation { retries: usize },

    #[error("training diverged at batch {batch} (loss {loss})")]
    Divergence { batch: usize, loss: f64 },

    #[error("problem too large for exhaustive search: {0}")]
    Size(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Coarse category used by front ends to pick an exit status.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) => ErrorCategory::Usage,
            Error::NotPositiveDefinite(_)
            | Error::SingularHessian { .. }
            | Error::SingularSubmatrix { .. }
            | Error::Divergence { .. }
            | Error::InfeasibleMutation { .. } => ErrorCategory::Numerical,
            _ => ErrorCategory::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numerical,
}
