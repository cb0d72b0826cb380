use thiserror::Error;

/// Errors produced by the estimation and inference pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain of the operation (e.g. `tau` outside (0,1)).
    #[error("domain error: {0}")]
    Domain(String),

    /// Inconsistent or unsupported configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical procedure failed (singular matrix, no convergence, ...).
    #[error("numerical error: {message}")]
    Numerical {
        message: String,
        /// Condition number estimate of the offending matrix, when one exists.
        condition: Option<f64>,
    },

    /// A solver failure at a particular grid point of a sub-sample fit.
    #[error("sub-sample {subsample}, grid point {grid_index}: {source}")]
    AtGridPoint {
        subsample: usize,
        grid_index: usize,
        #[source]
        source: Box<Error>,
    },

    /// Malformed or unexpected wire message.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn numerical(message: impl Into<String>) -> Self {
        Error::Numerical {
            message: message.into(),
            condition: None,
        }
    }

    /// `true` for errors caused by bad inputs or configuration rather than numerics.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Domain(_) | Error::Config(_) => true,
            Error::AtGridPoint { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
