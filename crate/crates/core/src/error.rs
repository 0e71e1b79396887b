use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("eigendecomposition did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    ConvergenceFailure { sweeps: usize, off_norm: f64 },

    #[error("matrix is not positive definite (min eigenvalue {min_eigenvalue:e})")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("unknown clinical variable `{0}`")]
    InvalidVariable(String),

    #[error("sphere of radius {radius_mm} mm contains no voxel centers")]
    DegenerateSphere { radius_mm: f64 },

    #[error("invalid zone masks: {0}")]
    InvalidMasks(String),

    #[error("contrastive loss needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("metric undefined: {0}")]
    Undefined(&'static str),

    #[error("all paired differences are zero")]
    DegeneratePairs,

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: u64, message: String },

    #[error("config hash mismatch: checkpoint has {stored}, expected {expected}")]
    ConfigHashMismatch { stored: String, expected: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {diagnostics}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        diagnostics: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable variant name, for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "InvalidInput",
            Error::InvalidShape(_) => "InvalidShape",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::ConvergenceFailure { .. } => "ConvergenceFailure",
            Error::NotPositiveDefinite { .. } => "NotPositiveDefinite",
            Error::InvalidVariable(_) => "InvalidVariable",
            Error::DegenerateSphere { .. } => "DegenerateSphere",
            Error::InvalidMasks(_) => "InvalidMasks",
            Error::BatchTooSmall(_) => "BatchTooSmall",
            Error::Undefined(_) => "Undefined",
            Error::DegeneratePairs => "DegeneratePairs",
            Error::Parse { .. } => "ParseError",
            Error::ConfigHashMismatch { .. } => "ConfigHashMismatch",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
