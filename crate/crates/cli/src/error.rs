use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_STAGE: i32 = 3;
pub const EXIT_INSUFFICIENT_DATA: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: stereoforge::Error,
    },

    #[error("stage `{stage}` is missing a dependency: {message}")]
    Dependency { stage: String, message: String },
}

impl CliError {
    pub fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }

    pub fn stage(stage: &str) -> impl FnOnce(stereoforge::Error) -> CliError + '_ {
        move |source| CliError::Stage { stage: stage.to_string(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Stage { source, .. } if source.is_insufficient_data() => EXIT_INSUFFICIENT_DATA,
            CliError::Stage { .. } | CliError::Dependency { .. } => EXIT_STAGE,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
