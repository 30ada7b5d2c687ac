use std::path::PathBuf;

use thiserror::Error;
use tif_core::TifError;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("missing artifact {}: {hint}", path.display())]
    MissingArtifact { path: PathBuf, hint: String },
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] TifError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type BenchResult<T> = std::result::Result<T, BenchError>;

impl BenchError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::MissingArtifact { .. } => "missing_artifact",
            Self::Usage(_) => "usage",
            Self::Core(TifError::Diverged { .. }) => "diverged",
            Self::Core(TifError::PremiseViolated(_)) => "premise_violated",
            Self::Core(_) => "core",
            Self::Io(_) => "io",
            Self::Csv(_) => "csv",
        }
    }

    /// One JSON object on one line, e.g. `{"error":"config","message":"..."}`.
    pub fn to_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}
