use thiserror::Error;

/// Errors raised by the solver modules.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("point is not on the domain boundary (distance {distance:e})")]
    NotOnBoundary { distance: f64 },

    #[error("Coulomb kernel evaluated at its singularity")]
    Singularity,

    #[error("batch size {p} does not divide particle count {n}")]
    InvalidBatchSize { n: usize, p: usize },

    #[error("boundary handling left the point {distance:e} outside the domain after {attempts} applications")]
    ReflectionFailure { distance: f64, attempts: usize },

    #[error("Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDivergence { iterations: usize, residual: f64 },

    #[error("sample at {position} lies outside the bin range [{lo}, {hi}]")]
    Coverage { position: f64, lo: f64, hi: f64 },

    #[error("reference integral vanishes; relative error undefined")]
    DegenerateReference,

    #[error("capacitance grid: {0}")]
    CapacitanceGrid(String),

    #[error("no frames supplied")]
    NoFrames,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

impl Error {
    /// Process exit status: 2 for configuration problems, 3 for numerical
    /// failures, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidDomain(_)
            | Error::InvalidParameter { .. }
            | Error::InvalidBatchSize { .. }
            | Error::CapacitanceGrid(_)
            | Error::Config(_) => 2,
            Error::Io(_) => 1,
            _ => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            reason: format!("must be finite and > 0, got {value}"),
        })
    }
}
