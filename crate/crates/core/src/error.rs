use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CrestError>;

#[derive(Debug, Error)]
pub enum CrestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Malformed dataset or trajectory file. `row` is 1-based.
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular Gram matrix (trace {trace_gram:e})")]
    SingularGram { trace_gram: f64 },

    #[error("degenerate objective: every class-sum vector is zero")]
    DegenerateObjective,

    #[error("symmetric eigensolver did not converge")]
    EigenFailure,

    #[error("spectral summary has no eigenvalue extremes (computed with trace_only)")]
    MissingEigenvalues,

    #[error("non-finite weights at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("model file, {section}: {message}")]
    Model { section: String, message: String },
}

impl CrestError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CrestError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            CrestError::SingularGram { .. }
                | CrestError::DegenerateObjective
                | CrestError::EigenFailure
                | CrestError::Diverged { .. }
        )
    }
}
