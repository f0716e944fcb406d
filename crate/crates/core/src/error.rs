use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Variance parameters outside their domain (non-PSD G, non-positive residual variance).
    #[error("parameter outside its domain: {0}")]
    ParameterDomain(String),

    /// A covariance block could not be factorized.
    #[error("numerically singular covariance: {0}")]
    NumericalSingularity(String),

    /// The selected fixed-effect design is rank deficient under the current covariance.
    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("optimizer did not converge after {iterations} iterations (best objective {best_objective})")]
    Convergence {
        iterations: usize,
        best_objective: f64,
        best_point: Vec<f64>,
    },

    #[error("degenerate variance for column {column}")]
    DegenerateVariance { column: usize },

    /// A method was requested beyond the model size it can handle.
    #[error("{method} is infeasible for p = {p} (guard: p <= {limit})")]
    Infeasible {
        method: String,
        p: usize,
        limit: usize,
    },

    #[error("insufficient accepted samples: {accepted} of {total} (need {required})")]
    InsufficientAcceptance {
        accepted: usize,
        total: usize,
        required: usize,
    },

    #[error("confidence bound is unbounded: f only reaches {attained} while searching for {target}")]
    UnboundedInterval { target: f64, attained: f64 },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl Error {
    /// True for failures of the numerical machinery, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NumericalSingularity(_)
                | Error::SingularDesign(_)
                | Error::Convergence { .. }
                | Error::DegenerateVariance { .. }
                | Error::InsufficientAcceptance { .. }
                | Error::UnboundedInterval { .. }
        )
    }
}
