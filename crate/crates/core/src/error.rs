use thiserror::Error;

/// Errors raised by the estimation engine.
///
/// Every variant maps to a stable machine-readable code through [`RdError::code`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum RdError {
    #[error("unsupported moment order {0} (maximum is {1})")]
    UnsupportedOrder(usize, usize),

    #[error("insufficient data on the {side} side: {have} usable points, need at least {need}")]
    InsufficientData {
        side: String,
        have: usize,
        need: usize,
    },

    #[error("solver hit the iteration cap ({iterations}) without meeting the tolerance")]
    SolverDiverged { iterations: usize },

    #[error("collinear covariates: {0}")]
    CollinearCovariates(String),

    #[error("degenerate residuals: zero spread")]
    DegenerateResiduals,

    #[error("singular sandwich matrix (condition number {0:.3e})")]
    SingularS(f64),

    #[error("assembled adjusted variance is not positive ({0:.6e})")]
    NegativeAdjustedVariance(f64),

    #[error("weak identification: |treatment jump| = {0:.4e} is below the threshold")]
    WeakIdentification(f64),

    #[error("degenerate curvature: bias-of-bias constant is numerically zero")]
    DegenerateCurvature,

    #[error("quantile inversion failed at probability {0}")]
    QuantileInversionFailure(f64),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("no usable rows after filtering")]
    EmptyAfterFiltering,

    #[error("singular design matrix")]
    SingularDesign,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl RdError {
    /// Stable identifier used in machine-readable error output.
    pub fn code(&self) -> &'static str {
        match self {
            RdError::UnsupportedOrder(..) => "unsupported_order",
            RdError::InsufficientData { .. } => "insufficient_data",
            RdError::SolverDiverged { .. } => "solver_diverged",
            RdError::CollinearCovariates(_) => "collinear_covariates",
            RdError::DegenerateResiduals => "degenerate_residuals",
            RdError::SingularS(_) => "singular_s",
            RdError::NegativeAdjustedVariance(_) => "negative_adjusted_variance",
            RdError::WeakIdentification(_) => "weak_identification",
            RdError::DegenerateCurvature => "degenerate_curvature",
            RdError::QuantileInversionFailure(_) => "quantile_inversion_failure",
            RdError::MissingColumn(_) => "missing_column",
            RdError::Parse { .. } => "parse_error",
            RdError::EmptyAfterFiltering => "empty_after_filtering",
            RdError::SingularDesign => "singular_design",
            RdError::InvalidInput(_) => "invalid_input",
            RdError::Io(_) => "io_error",
        }
    }

    /// Process exit status for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            RdError::MissingColumn(_)
            | RdError::Parse { .. }
            | RdError::EmptyAfterFiltering
            | RdError::InvalidInput(_)
            | RdError::Io(_) => 2,
            _ => 3,
        }
    }
}

impl From<std::io::Error> for RdError {
    fn from(e: std::io::Error) -> Self {
        RdError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, RdError>;
