use thiserror::Error;

/// Coarse classification used by front ends to map failures onto exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad data, bad configuration or an unsupported request.
    Input,
    /// A solver or resampling procedure could not produce a usable answer.
    Numerical,
    /// A condition that should be impossible was observed.
    Invariant,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("treatment value {value} at row {row} is not 0 or 1")]
    TreatmentNotBinary { row: usize, value: f64 },
    #[error("propensity value {value} at row {row} is outside (0, 1)")]
    PropensityOutOfRange { row: usize, value: f64 },
    #[error("non-finite value in column `{column}` at row {row}")]
    NonFiniteValue { column: String, row: usize },
    #[error("duplicate covariate name `{0}`")]
    DuplicateName(String),
    #[error("dataset has {n} rows, at least {min} are required")]
    TooFewRows { n: usize, min: usize },
    #[error("dataset has no covariates")]
    NoCovariates,
    #[error("length mismatch for {what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid nuisance specification: {0}")]
    InvalidSpec(String),
    #[error("design matrix is singular")]
    SingularDesign,
    #[error("solver did not converge after {iterations} iterations (residual {residual:.3e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },
    #[error("logistic fit diverged (quasi-separation); use a ridge penalty")]
    QuasiSeparation,
    #[error("binary response has a single class")]
    SingleClass,
    #[error("zero weight mass")]
    ZeroWeightMass,
    #[error("candidate covariate {k} is degenerate")]
    DegenerateCandidate { k: usize },
    #[error("all candidate covariates are degenerate")]
    AllDegenerate,
    #[error("weighted projection design is singular")]
    SingularProjection,
    #[error("m grid has {points} point(s) at or above the floor {floor}; at least 2 are needed")]
    GridTooShort { points: usize, floor: usize },
    #[error("{failed} of {requested} bootstrap replicates were degenerate")]
    TooManyDegenerateReplicates { failed: usize, requested: usize },
    #[error("covariance clipping removed {fraction:.3} of the trace mass")]
    NonPsdCovariance { fraction: f64 },
    #[error("unsupported calibration: {0}")]
    UnsupportedCalibration(String),
    #[error("likelihood ratio test is infeasible: {0}")]
    InfeasibleLrt(String),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("invalid bootstrap plan: {0}")]
    InvalidPlan(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{failed} of {reps} Monte Carlo repetitions failed; first error: {first}")]
    StudyFailed {
        failed: usize,
        reps: usize,
        first: String,
    },
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        use Error::*;
        match self {
            TreatmentNotBinary { .. }
            | PropensityOutOfRange { .. }
            | NonFiniteValue { .. }
            | DuplicateName(_)
            | TooFewRows { .. }
            | NoCovariates
            | LengthMismatch { .. }
            | EmptyInput(_)
            | InvalidSpec(_)
            | SingleClass
            | UnsupportedCalibration(_)
            | InvalidScenario(_)
            | InvalidPlan(_)
            | InvalidConfig(_)
            | GridTooShort { .. }
            | InfeasibleLrt(_) => ErrorKind::Input,
            Invariant(_) => ErrorKind::Invariant,
            _ => ErrorKind::Numerical,
        }
    }

    /// Errors after which a bootstrap replicate is discarded and redrawn.
    pub(crate) fn is_replicate_degeneracy(&self) -> bool {
        matches!(
            self,
            Error::AllDegenerate
                | Error::DegenerateCandidate { .. }
                | Error::SingularProjection
                | Error::SingularDesign
                | Error::SingleClass
                | Error::QuasiSeparation
                | Error::ZeroWeightMass
                | Error::ConvergenceFailure { .. }
                | Error::TooFewRows { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
