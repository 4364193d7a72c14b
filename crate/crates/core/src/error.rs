use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// A factorization broke down; `pivot` is the smallest diagonal pivot seen.
    #[error("numerical degeneracy in {context} (smallest pivot {pivot:e})")]
    Degenerate { context: String, pivot: f64 },

    #[error("forward model failed for particle {index}: {message}")]
    ForwardModel { index: usize, message: String },

    #[error("forward model returned a non-finite value: {0}")]
    NonFinite(String),

    #[error("sampler diverged at step {step}")]
    Diverged { step: usize },

    #[error("loss transform undefined: EIG estimate {eig} is not below c_shift {c_shift}; raise c_shift")]
    LossDomain { eig: f64, c_shift: f64 },

    #[error("integrator failed at t = {t}: {reason}")]
    Integrator { t: f64, reason: String },

    #[error("linear solve failed: {0}")]
    Solver(String),

    #[error("sequential step {step}, stage {stage}: {source}")]
    Stage {
        step: usize,
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn in_stage(self, step: usize, stage: &'static str) -> Self {
        Error::Stage {
            step,
            stage,
            source: Box::new(self),
        }
    }

    /// Attach a particle index to forward-model failures.
    pub(crate) fn at_particle(self, index: usize) -> Self {
        match self {
            Error::ForwardModel { message, .. } => Error::ForwardModel { index, message },
            other => Error::ForwardModel {
                index,
                message: other.to_string(),
            },
        }
    }
}
