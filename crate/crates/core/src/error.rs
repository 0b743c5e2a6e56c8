use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure category, used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Format,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("singular SAR matrix (kappa2 = {kappa2}): pivot {pivot:e} at row {row}")]
    SingularMatrix { kappa2: f64, pivot: f64, row: usize },

    #[error("singular basis matrix: {0}")]
    SingularBasis(String),

    #[error("degenerate field: spread {spread:e} relative to location {location:e}")]
    DegenerateField { spread: f64, location: f64 },

    #[error("input shape mismatch: expected {expected}, got {actual}")]
    InputShape { expected: String, actual: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (lr = {lr:e})")]
    NonFiniteLoss { epoch: usize, batch: usize, lr: f64 },

    #[error("fit failure: {0}")]
    FitFailure(String),

    #[error("degenerate design matrix: {0}")]
    DegenerateDesign(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (this build reads version {supported})")]
    Version { found: u32, supported: u32 },

    #[error("truncated payload in {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: String,
        expected: u64,
        found: u64,
    },

    #[error("checksum mismatch in {what}: expected {expected}, computed {computed}")]
    Checksum {
        what: String,
        expected: String,
        computed: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Domain(_) | Error::Config(_) | Error::InputShape { .. } => ErrorKind::Usage,
            Error::Format(_)
            | Error::Version { .. }
            | Error::Truncated { .. }
            | Error::Checksum { .. }
            | Error::Json(_) => ErrorKind::Format,
            Error::SingularMatrix { .. }
            | Error::SingularBasis(_)
            | Error::DegenerateField { .. }
            | Error::NonFiniteLoss { .. }
            | Error::FitFailure(_)
            | Error::DegenerateDesign(_) => ErrorKind::Numerical,
            Error::Io(_) => ErrorKind::Io,
        }
    }

    /// Short machine-readable tag.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::SingularMatrix { .. } => "singular_matrix",
            Error::SingularBasis(_) => "singular_basis",
            Error::DegenerateField { .. } => "degenerate_field",
            Error::InputShape { .. } => "input_shape",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::FitFailure(_) => "fit_failure",
            Error::DegenerateDesign(_) => "degenerate_design",
            Error::Format(_) => "format",
            Error::Version { .. } => "version",
            Error::Truncated { .. } => "truncated",
            Error::Checksum { .. } => "checksum",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
