use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("missing load data for day `{day}`, entity `{entity}`")]
    MissingCell { day: String, entity: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid grouping: {0}")]
    InvalidGrouping(String),

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("infeasible response for entity {entity} in outcome {outcome}: {reason}")]
    Infeasible {
        entity: usize,
        outcome: usize,
        reason: String,
    },

    #[error("solver did not converge after {iterations} iterations (best objective {best_objective})")]
    NotConverged {
        iterations: usize,
        best_objective: f64,
        best_capacities: Vec<f64>,
    },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),

    #[error("instance too large for brute force: {0}")]
    TooLarge(String),

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
