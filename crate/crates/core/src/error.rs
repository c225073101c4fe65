use thiserror::Error;

pub type Result<T> = std::result::Result<T, DccError>;

#[derive(Debug, Error)]
pub enum DccError {
    /// An argument is outside the domain of the function.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke a precondition of the operation.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("state space has {states} states, cap is {cap}")]
    Size { states: usize, cap: usize },

    #[error("linear program: {0}")]
    Lp(String),

    /// Should not happen for well-formed inputs (e.g. a singular evaluation system).
    #[error("internal error: {0}")]
    Internal(String),

    #[error("slow iteration {iteration}: {source}")]
    Iteration {
        iteration: usize,
        #[source]
        source: Box<DccError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DccError {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        DccError::Iteration {
            iteration,
            source: Box::new(self),
        }
    }
}
