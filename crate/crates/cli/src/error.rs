use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] dqrp_core::Error),

    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },

    #[error("data file: {0}")]
    Csv(#[from] csv::Error),

    #[error("{0} self-test checks failed")]
    SelftestFailed(usize),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 2 for configuration and input problems, 3 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if !e.is_config() && is_numerical(e) => 3,
            CliError::SelftestFailed(_) => 3,
            _ => 2,
        }
    }
}

fn is_numerical(e: &dqrp_core::Error) -> bool {
    match e {
        dqrp_core::Error::Numerical { .. } => true,
        dqrp_core::Error::AtGridPoint { source, .. } => is_numerical(source),
        _ => false,
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io {
            path: "<stream>".into(),
            source: e,
        }
    }
}
