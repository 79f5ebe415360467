use thiserror::Error;

/// Errors raised by the estimation engine and the simulation lab.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(
        "moment of order {order} does not exist for tukey(g={g}, h={h}): requires h < 1/{order}"
    )]
    MomentNonexistent { order: u32, g: f64, h: f64 },

    #[error("operation not supported for random-effects family `{family}`: {what}")]
    UnsupportedFamily { family: String, what: &'static str },

    #[error("quadrature order {order} out of range 1..={max}")]
    QuadratureOrder { order: usize, max: usize },

    #[error("curvature must be positive, got {0}")]
    NonpositiveCurvature(f64),

    #[error("non-finite objective value at coordinate {coordinate} (x = {value})")]
    NonFiniteObjective { coordinate: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("cannot parse family spec `{input}`: {reason}")]
    FamilySpec { input: String, reason: String },

    #[error("cannot parse model spec `{input}`: {reason}")]
    ModelSpec { input: String, reason: String },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("missing key: {0}")]
    MissingKey(String),

    #[error("infeasible mixture moments: {0}")]
    InfeasibleMixture(String),

    #[error("missing true random effects for MSEP scoring")]
    MissingTruth,

    #[error("csv: {0}")]
    Csv(String),

    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
