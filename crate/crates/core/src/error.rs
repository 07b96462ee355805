use thiserror::Error;

pub type Result<T> = std::result::Result<T, PlnError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlnError {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: String,
        found: String,
    },

    #[error("value {value} outside the domain of {what}")]
    Domain { what: &'static str, value: f64 },

    #[error("invalid observation {value} at ({row}, {col}): {reason}")]
    InvalidObservation {
        row: usize,
        col: usize,
        value: f64,
        reason: &'static str,
    },

    #[error("non-finite value while evaluating {0}")]
    Overflow(&'static str),

    #[error("standard deviations must be strictly positive (found {0})")]
    NonPositiveScale(f64),

    #[error("covariate matrix is rank deficient (rank {rank} < {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("column {0} has no nonzero observed count")]
    AllZeroColumn(String),

    #[error("matrix is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPsd(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("optimization failed: {0}")]
    Optimization(String),

    #[error("Poisson GLM did not converge for column {column} after {iterations} iterations")]
    GlmNonConvergence { column: usize, iterations: usize },

    #[error("marginal likelihood oracle requires p <= 2 or a diagonal covariance")]
    OracleIneligible,

    #[error("input error: {0}")]
    Input(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for PlnError {
    fn from(err: std::io::Error) -> Self {
        PlnError::Io(err.to_string())
    }
}

pub(crate) fn check_dims(
    context: &'static str,
    expected: (usize, usize),
    found: (usize, usize),
) -> Result<()> {
    if expected != found {
        return Err(PlnError::Dimension {
            context,
            expected: format!("{}x{}", expected.0, expected.1),
            found: format!("{}x{}", found.0, found.1),
        });
    }
    Ok(())
}

impl PlnError {
    /// Stable short name, used in structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            PlnError::Dimension { .. } => "dimension",
            PlnError::Domain { .. } => "domain",
            PlnError::InvalidObservation { .. } => "invalid-observation",
            PlnError::Overflow(_) => "overflow",
            PlnError::NonPositiveScale(_) => "non-positive-scale",
            PlnError::RankDeficient { .. } => "rank-deficient",
            PlnError::AllZeroColumn(_) => "all-zero-column",
            PlnError::NotPsd(_) => "not-psd",
            PlnError::Config(_) => "config",
            PlnError::Optimization(_) => "optimization",
            PlnError::GlmNonConvergence { .. } => "glm-non-convergence",
            PlnError::OracleIneligible => "oracle-ineligible",
            PlnError::Input(_) => "input",
            PlnError::Io(_) => "io",
        }
    }

    /// Whether the failure comes from the user's inputs or settings rather
    /// than from the numerics.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            PlnError::Config(_)
                | PlnError::Input(_)
                | PlnError::Io(_)
                | PlnError::InvalidObservation { .. }
                | PlnError::AllZeroColumn(_)
                | PlnError::RankDeficient { .. }
                | PlnError::Dimension { .. }
        )
    }
}
