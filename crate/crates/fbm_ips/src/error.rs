//! Crate-wide error type.
//!
//! Errors are split along the boundary the CLI cares about: configuration
//! problems (bad parameters, malformed config files) versus numerical
//! failures discovered while running (non-finite states, singular matrices,
//! diverging iterations). The CLI maps the former to exit code 2 and the
//! latter to exit code 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("hurst parameter must lie in the open interval (0, 1), got {0}")]
    InvalidHurst(f64),

    #[error("kernel weights require h > 1/2 (got h = {0}); at h = 1/2 the correction vanishes, use the Ito branch instead")]
    KernelNeedsRoughness(f64),

    #[error("time grid requires a finite horizon > 0 and at least 2 steps (got horizon {horizon}, {n_steps} steps)")]
    InvalidGrid { horizon: f64, n_steps: usize },

    #[error("non-finite state for particle {particle} at node {node} (value {value}); the drift or the step size is likely too aggressive")]
    NonFiniteState {
        particle: usize,
        node: usize,
        value: f64,
    },

    #[error("cholesky factorization failed at leading minor {minor}; covariance matrix is not positive definite")]
    CholeskyFailure { minor: usize },

    #[error("psi matrix is singular or ill-conditioned (condition number {cond:.3e} exceeds 1e12); the drift components are numerically collinear on this sample")]
    IllConditionedPsi { cond: f64 },

    #[error("fixed-point iteration diverged after {iterations} iterations; residual trajectory {trajectory:?}")]
    FixedPointDiverged {
        iterations: usize,
        trajectory: Vec<f64>,
    },

    #[error("estimated psi is not positive ({value}); the drift integral positivity assumption fails for this model/horizon")]
    PsiNotPositive { value: f64 },

    #[error("estimator `{estimator}` supports only scalar parameters (p = 1), got p = {p}")]
    ScalarParameterOnly { estimator: &'static str, p: usize },

    #[error("empty sample passed to {context}")]
    EmptySample { context: &'static str },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// CLI exit code for this error: 2 for configuration problems, 3 for
    /// numerical failures encountered mid-run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::InvalidHurst(_)
            | Error::InvalidGrid { .. }
            | Error::ScalarParameterOnly { .. }
            | Error::InvalidInput(_)
            | Error::Io { .. } => 2,
            _ => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
