use thiserror::Error;

/// Command failures, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config, bad arguments or a refused overwrite.
    #[error("{0}")]
    Config(String),
    /// Loss or sampling trajectory became non-finite.
    #[error("{0}")]
    Diverged(String),
    /// A required artifact is absent or does not fit the config.
    #[error("{0}")]
    Missing(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Diverged(_) => 3,
            CliError::Missing(_) => 4,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<jdl_core::Error> for CliError {
    fn from(e: jdl_core::Error) -> Self {
        use jdl_core::Error as E;
        let msg = e.to_string();
        match e {
            E::ConfigInvalid(_) | E::InvalidPrior(_) | E::BadClassIndex { .. } | E::BadSubsequence(_) | E::InvalidRange(_) => CliError::Config(msg),
            E::TrainingDiverged { .. } | E::NonFiniteSample(_) => CliError::Diverged(msg),
            E::CheckpointMismatch(_) | E::BadCheckpoint(_) => CliError::Missing(msg),
            E::Io(ref io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Missing(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Missing(format!("unreadable manifest: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
