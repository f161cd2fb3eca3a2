use thiserror::Error;

/// Errors raised by solvers, simulators and the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("weights sum to {sum}, expected {expected}")]
    MassMismatch { sum: f64, expected: f64 },

    #[error("not a probability vector: {0}")]
    NotSimplex(String),

    #[error("point {point:?} is closer than {margin} to the simplex boundary")]
    Boundary { point: Vec<f64>, margin: f64 },

    #[error("negative argument: {0}")]
    Negative(String),

    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time step {dt} violates the stability bound (admissible step: {admissible})")]
    Cfl { dt: f64, admissible: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("multinomial draw charges state {state} which carries no mass")]
    SupportViolation { state: usize },

    #[error("policy rate {rate} exceeds its declared bound {bound}")]
    RateOverflow { rate: f64, bound: f64 },

    #[error("out of range: {0}")]
    OutOfRange(String),

    #[error("enumeration with {terms} terms exceeds the limit {limit}")]
    EnumerationSize { terms: usize, limit: usize },

    #[error("estimated memory {bytes} bytes exceeds the limit {limit}")]
    Memory { bytes: usize, limit: usize },

    #[error("path carries no Gaussian increments")]
    MissingIncrements,

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
