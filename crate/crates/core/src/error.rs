use thiserror::Error;

/// Errors raised by the engine. Each variant maps onto a CLI exit code via [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: String,
        reason: String,
    },

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("malformed configuration line {line}: {reason}")]
    ConfigSyntax { line: usize, reason: String },

    #[error("grid is not geometric for scale {scale} (grid ratio {ratio})")]
    NonGeometricGrid { scale: f64, ratio: f64 },

    #[error("unknown mode index {0}")]
    UnknownMode(usize),

    #[error("basis mismatch: {0}")]
    BasisMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("not a Feshbach pair: {what} margin {margin:e} below floor {floor:e}")]
    NotFeshbachPair {
        what: &'static str,
        margin: f64,
        floor: f64,
    },

    #[error("first decimation diverges: Neumann ratio {ratio:.4} (coupling {lambda0:e})")]
    FirstStepDiverges { ratio: f64, lambda0: f64 },

    #[error("first decimation diverges: coupling {lambda0:e} above the empirical critical coupling {lambda_c:e} (limited by {limiting})")]
    CouplingAboveCritical {
        lambda0: f64,
        lambda_c: f64,
        limiting: String,
    },

    #[error("F evaluated outside its invertibility region at r = {r:.6}: |w00| = {value:e}")]
    ResolventDomain { r: f64, value: f64 },

    #[error("term depth {depth} exceeds series truncation {l_max}")]
    DepthExceeded { depth: usize, l_max: usize },

    #[error("E_rho inversion failed at zeta = {zeta:e}: {reason}")]
    InversionFailed { zeta: f64, reason: String },

    #[error("flow left the polydisc at iteration {iteration}: {reason}")]
    PolydiscEscape { iteration: usize, reason: String },

    #[error("eigensolver did not converge (residual {residual:e})")]
    SolverNonConvergence { residual: f64 },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Exit code contract of the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidParameter { .. } | Error::UnknownKey(_) | Error::ConfigSyntax { .. } => 1,
            Error::FirstStepDiverges { .. } | Error::CouplingAboveCritical { .. } | Error::NotFeshbachPair { .. } => 2,
            Error::ResolventDomain { .. }
            | Error::InversionFailed { .. }
            | Error::PolydiscEscape { .. }
            | Error::DepthExceeded { .. } => 3,
            _ => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
