use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("ambient spaces differ")]
    AmbientMismatch,
    #[error("domain error: {0}")]
    Domain(String),
    #[error("point {0} lies in the singular set")]
    SingularPoint(f64),
    #[error("orbit hit the singular set at step {step}")]
    SingularOrbit { step: usize },
    #[error("operation needs a one-dimensional branch map, {0} has none")]
    NoBranches(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("pull-back leaves a single branch; largest feasible radius is {max_radius}")]
    ShrinkRadius { max_radius: f64 },
    #[error("empty effective sample: {0}")]
    EmptySample(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("inconsistent tower state at step {step}: {detail}")]
    InconsistentState { step: usize, detail: String },
    #[error("config constraint `{constraint}` violated: {detail}")]
    Config { constraint: String, detail: String },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(constraint: &str, detail: impl Into<String>) -> Error {
        Error::Config { constraint: constraint.to_string(), detail: detail.into() }
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Parse(_) | Error::Io(_) => 2,
            Error::Verification(_) | Error::InconsistentState { .. } => 3,
            _ => 4,
        }
    }
}
