use thiserror::Error;

#[derive(Debug, Error)]
pub enum GovernError {
    /// A state or output left the finite domain of the plant.
    #[error("plant domain violation: {0}")]
    PlantDomain(String),

    #[error("equilibrium iteration did not converge after {steps} steps (residual {residual:e})")]
    NonConvergence { steps: usize, residual: f64 },

    /// Inconsistent dimensions or arguments between cooperating objects.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("solver failure: {0}")]
    Solver(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, GovernError>;

impl GovernError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        GovernError::Contract(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        GovernError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
