use thiserror::Error;

/// Errors raised by the estimation engine.
///
/// Each variant belongs to one subsystem; [`Error::module`] returns the
/// subsystem name so front ends can emit module-qualified codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid panel: {0}")]
    InvalidPanel(String),
    #[error("missing outcome for unit {unit} at period {period}")]
    MissingOutcome { unit: usize, period: usize },
    #[error("invalid base rule: {0}")]
    InvalidBaseRule(String),
    #[error("base rule is not admissible at entry date {t}")]
    InadmissibleBase { t: usize },
    #[error("period {period} is outside 1..={n_periods}")]
    HorizonOutOfRange { period: i64, n_periods: usize },
    #[error("no admissible cells at horizon {horizon}")]
    EmptyStack { horizon: i64 },

    #[error("no retained cells to aggregate")]
    NoRetainedCells,
    #[error("alignment error: {0}")]
    AlignmentError(String),

    #[error("basis has rank 0 after pruning")]
    DegenerateBasis,
    #[error("tilting solver did not converge after {iterations} iterations (moment residual {residual:.3e})")]
    IptDiverged { iterations: usize, residual: f64 },
    #[error("separation detected: odds weight reached {max_odds:.3e}")]
    SeparationDetected { max_odds: f64 },
    #[error("singular normal equations")]
    SingularNormalEquations,

    #[error("singular moment Jacobian (condition number {condition:.3e})")]
    SingularJacobian { condition: f64 },
    #[error("at least two clusters are required, got {0}")]
    TooFewClusters(usize),
    #[error("every horizon has zero standard error")]
    DegenerateBand,
    #[error("invalid bootstrap configuration: {0}")]
    InvalidBootstrap(String),

    #[error("invalid design: {0}")]
    InvalidDesign(String),
    #[error("campaign failed: {failed} of {attempted} estimator runs failed")]
    CampaignFailed { failed: usize, attempted: usize },
}

impl Error {
    pub fn module(&self) -> &'static str {
        use Error::*;
        match self {
            InvalidPanel(_)
            | MissingOutcome { .. }
            | InvalidBaseRule(_)
            | InadmissibleBase { .. }
            | HorizonOutOfRange { .. }
            | EmptyStack { .. } => "panel",
            NoRetainedCells | AlignmentError(_) => "aggregation",
            DegenerateBasis
            | IptDiverged { .. }
            | SeparationDetected { .. }
            | SingularNormalEquations => "nuisance",
            SingularJacobian { .. } | TooFewClusters(_) | DegenerateBand | InvalidBootstrap(_) => {
                "inference"
            }
            InvalidDesign(_) | CampaignFailed { .. } => "simulation",
        }
    }

    /// True for failures of a numerical routine rather than bad input.
    pub fn is_numerical(&self) -> bool {
        use Error::*;
        matches!(
            self,
            IptDiverged { .. }
                | SeparationDetected { .. }
                | SingularNormalEquations
                | SingularJacobian { .. }
                | DegenerateBand
                | DegenerateBasis
                | CampaignFailed { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
