use thiserror::Error;

/// Errors raised anywhere in the engagement pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state is singular (distance to a primary {distance:e} below guard)")]
    SingularState { distance: f64 },

    #[error("integration failed at t = {t}: {reason}")]
    BlowUp { t: f64, reason: String },

    #[error("root bracketing failed: {0}")]
    Bracketing(String),

    #[error("orbit is not periodic: residual {residual:e}")]
    Periodicity { residual: f64 },

    #[error("differential correction did not converge after {iterations} iterations (residual {residual:e})")]
    CorrectionFailure { iterations: usize, residual: f64 },

    #[error("orbit has no usable real unstable eigenvalue: {0}")]
    OrbitStability(String),

    #[error("singular control Hessian, larger regularization required")]
    SingularHessian,

    #[error("conjugate point: Riccati solution escaped at t = {t}")]
    ConjugatePoint { t: f64 },

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Process exit code class: configuration 2, numerical 3, I/O 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) | Error::Config(_) | Error::Serde(_) => 2,
            Error::Io(_) | Error::Csv(_) => 4,
            _ => 3,
        }
    }

    /// True for failures the regularization schedule can recover from.
    pub fn is_blow_up(&self) -> bool {
        matches!(self, Error::BlowUp { .. } | Error::SingularHessian)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
