use std::path::PathBuf;

use gda_core::GdaError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("config: {0}")]
    Config(String),

    #[error("missing artifact {}: {reason}", path.display())]
    MissingArtifact { path: PathBuf, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Core(#[from] GdaError),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl BenchError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            BenchError::Config(_) => 1,
            BenchError::MissingArtifact { .. } => 2,
            BenchError::Numerical(_) => 3,
            BenchError::Core(e) => match e {
                GdaError::NonFinite(_) | GdaError::Diverged { .. } | GdaError::ZeroNormEmbedding => 3,
                GdaError::Checkpoint(_) => 2,
                GdaError::InvalidParameter(_) => 1,
                _ => 3,
            },
            BenchError::Io(_) | BenchError::Csv(_) => 2,
        }
    }
}

pub type Result<T, E = BenchError> = std::result::Result<T, E>;
