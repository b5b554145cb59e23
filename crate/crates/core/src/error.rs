use std::path::PathBuf;

/// Errors raised anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("matrix is not positive definite: pivot {pivot:e} at index {index} (increase the ridge)")]
    Singular { pivot: f64, index: usize },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("row {0} has zero L2 norm")]
    ZeroRow(usize),

    #[error("dimension {0} has zero variance across the batch (collapsed)")]
    ZeroVariance(usize),

    #[error("backward root must be 1x1, got {0}x{1}")]
    NonScalarRoot(usize, usize),

    #[error("loss builder is not deterministic: {0} != {1}")]
    NonDeterministic(f64, f64),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("non-finite loss at step {step} ({context})")]
    Diverged { step: usize, context: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path} at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("schema version mismatch in {path}: found {found}, expected {expected}")]
    Schema {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("missing dependency: {0}")]
    Missing(String),
}

pub type Result<T> = std::result::Result<T, LabError>;

impl LabError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        LabError::Invalid(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }
}
