use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, cost, scenario or learner configuration.
    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    /// The uniformized chain has no event at this state (empty queue, zero arrival rate).
    #[error("no event possible at x={x} with arrival rate {lambda}")]
    NoEvent { x: usize, lambda: f64 },

    #[error("value iteration did not converge after {iterations} iterations (last update {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("singular system in exact policy evaluation")]
    Singular,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by configuration or schema problems.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. } | Error::Json { .. })
    }

    /// True for numerical failures (non-convergence, degenerate chains).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. } | Error::NoEvent { .. } | Error::Singular
        )
    }
}
