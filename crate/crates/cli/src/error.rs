use thiserror::Error;
use tsap_core::pipeline::PipelineError;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config or arguments; nothing was run.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("stage {stage} failed: {message}")]
    Runtime { stage: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 1,
            Self::Runtime { .. } => 2,
        }
    }

    pub fn runtime(stage: &str, e: impl std::fmt::Display) -> Self {
        Self::Runtime {
            stage: stage.to_string(),
            message: e.to_string(),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config { .. } => Self::Validation(e.to_string()),
            other => Self::runtime("pipeline", other),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// Attaches a stage name to any error.
pub(crate) trait StageContext<T> {
    fn stage(self, stage: &str) -> Result<T>;
}

impl<T, E: std::fmt::Display> StageContext<T> for std::result::Result<T, E> {
    fn stage(self, stage: &str) -> Result<T> {
        self.map_err(|e| CliError::runtime(stage, e))
    }
}
