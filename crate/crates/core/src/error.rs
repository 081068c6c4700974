use thiserror::Error;

use crate::identify::IdentifyVerdict;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("formula error at byte {pos}: {msg}")]
    Formula { pos: usize, msg: String },

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("basis sets were built over different covariate schemas")]
    MismatchedKinds,

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("y = {y} is outside the support of the {family} family")]
    OutsideSupport { y: f64, family: &'static str },

    #[error("tilted natural parameter {theta} is outside the domain of the {family} cumulant; the odds integral diverges")]
    TiltDomain { theta: f64, family: &'static str },

    #[error("design matrix is rank deficient ({0})")]
    RankDeficient(String),

    #[error("{what} did not converge after {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("mixture component collapsed (variance below floor)")]
    DegenerateComponent,

    #[error("all {0} mixture restarts collapsed")]
    AllRestartsDegenerate(usize),

    #[error("every candidate model failed to fit")]
    AllCandidatesFailed,

    #[error("fractional weight row for unit {unit} is identically zero: no donor has positive density")]
    ZeroWeightRow { unit: usize },

    #[error("Newton solve diverged: step-halving exhausted")]
    NewtonDivergence,

    #[error("model is provably unidentifiable: {0}")]
    Unidentifiable(Box<IdentifyVerdict>),

    #[error("{what} is singular (condition number {cond:.3e})")]
    Singular { what: &'static str, cond: f64 },

    #[error("row {row}, column `{column}`: {msg}")]
    Ingest { row: usize, column: String, msg: String },

    #[error("dataset has no respondents")]
    NoRespondents,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{failed} of {total} replicates failed (limit 5%)")]
    ReplicateFailures { failed: usize, total: usize },

    #[error("quadrature did not reach tolerance {tol:e} (estimated error {err:e})")]
    Quadrature { tol: f64, err: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code: 1 for usage, configuration and input errors, the
    /// verdict code for identifiability refusals, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Formula { .. }
            | Error::UnknownCovariate(_)
            | Error::MismatchedKinds
            | Error::InvalidSpec(_)
            | Error::OutsideSupport { .. }
            | Error::Ingest { .. }
            | Error::NoRespondents
            | Error::Config(_)
            | Error::Io(_)
            | Error::Csv(_) => 1,
            Error::Unidentifiable(v) => v.status.exit_code(),
            _ => 4,
        }
    }

    pub(crate) fn spec(msg: impl Into<String>) -> Self {
        Error::InvalidSpec(msg.into())
    }
}
