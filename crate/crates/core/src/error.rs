use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{y} is outside the range of h_f' on (0, inf)")]
    OutOfRange { y: f64 },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("state {state}: {source}")]
    AtState {
        state: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("fixed point not reached after {iterations} iterations (last residuals {trace:?})")]
    FixedPointNotReached { iterations: usize, trace: Vec<f64> },

    #[error("policy puts mass {mass} on action {action} of state {state} outside the behavior support")]
    SupportViolation { state: usize, action: usize, mass: f64 },

    #[error("instance too large: {0}")]
    SizeGuard(String),

    #[error("non-finite values at step {step}: {what}")]
    Divergence { step: usize, what: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn at_state(state: usize, source: Error) -> Self {
        Error::AtState {
            state,
            source: Box::new(source),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
