use thiserror::Error;

/// Errors raised by the estimation, bandwidth and inference routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum RkdError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("array length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    /// Fewer than `required` kernel-positive observations on one side of the kink.
    #[error(
        "insufficient one-sided support: {left} left / {right} right in-window observations, need {required} per side"
    )]
    Identification {
        left: usize,
        right: usize,
        required: usize,
    },

    #[error("weighted Gram matrix is ill-conditioned (condition number {condition:.3e})")]
    IllConditioned { condition: f64 },

    #[error("quantile solver did not converge after {iterations} iterations (last objective {objective})")]
    Convergence { iterations: usize, objective: f64 },

    #[error("no observations inside the running-variable window")]
    EmptyWindow,

    #[error("baseline mean is not positive ({mu0}); the Lorenz curve is undefined")]
    NonpositiveMean { mu0: f64 },

    #[error("conditional density estimate at tau = {tau} is not positive ({density})")]
    PivotalDensity { tau: f64, density: f64 },

    #[error("kink gap {gap} is numerically zero")]
    DegenerateKink { gap: f64 },

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("kernel constants for {kernel} with p = {p} are not positive definite")]
    SingularKernelConstants { kernel: String, p: usize },

    /// Wraps an error raised while processing a single grid point.
    #[error("at grid point {point}: {source}")]
    AtPoint {
        point: f64,
        #[source]
        source: Box<RkdError>,
    },
}

impl RkdError {
    pub fn at(self, point: f64) -> Self {
        RkdError::AtPoint {
            point,
            source: Box::new(self),
        }
    }

    /// Strips any grid-point context.
    pub fn root(&self) -> &RkdError {
        match self {
            RkdError::AtPoint { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, RkdError>;
