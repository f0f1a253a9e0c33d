use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced at time index {time_index} for datum {datum}")]
    NonFinite { time_index: usize, datum: usize },

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("softmax normalisation underflowed after a shift of {shift}")]
    SoftmaxUnderflow { shift: f64 },

    #[error("target {datum} is not a probability density (mass {mass})")]
    NotADensity { datum: usize, mass: f64 },

    #[error("step size underflow at iteration {iteration}: backtracking exhausted")]
    StepUnderflow { iteration: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("stationarity violated: residual {0:e}")]
    NotStationary(f64),

    #[error("successive approximations diverged after {sweeps} sweeps")]
    Divergence { sweeps: usize, history: Vec<f64> },

    #[error("duplicate training data: items {0} and {1} coincide")]
    DuplicateData(usize, usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable tag, used by the CLI error JSON and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::GridMismatch(_) => "grid_mismatch",
            Error::Shape(_) => "shape_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::NoConvergence { .. } => "no_convergence",
            Error::SoftmaxUnderflow { .. } => "softmax_underflow",
            Error::NotADensity { .. } => "not_a_density",
            Error::StepUnderflow { .. } => "step_underflow",
            Error::Degenerate(_) => "degenerate",
            Error::NotStationary(_) => "not_stationary",
            Error::Divergence { .. } => "divergence",
            Error::DuplicateData(..) => "duplicate_data",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Parse(_) => "parse",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
