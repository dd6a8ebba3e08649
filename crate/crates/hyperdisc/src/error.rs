use std::path::PathBuf;

use hyperdisc_core::Error as CoreError;

use crate::config::Stage;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: CoreError,
    },
    #[error("stage `{stage}` has no artifacts in {}", dir.display())]
    MissingStage { stage: Stage, dir: PathBuf },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn core_code(e: &CoreError) -> i32 {
    match e {
        CoreError::Config(_) => 2,
        CoreError::Numerical(_) | CoreError::Diverged { .. } => 3,
        _ => 4,
    }
}

impl PipelineError {
    /// Process exit code: 2 config, 3 numerical failure, 4 stage failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { source, .. } => match core_code(source) {
                2 => 2,
                3 => 3,
                _ => 4,
            },
            PipelineError::Core(e) => match core_code(e) {
                2 => 2,
                3 => 3,
                _ => 4,
            },
            PipelineError::Io { .. }
            | PipelineError::Json { .. }
            | PipelineError::Csv { .. }
            | PipelineError::MissingStage { .. } => 4,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(stage: Stage) -> impl FnOnce(CoreError) -> Self {
        move |source| PipelineError::Stage { stage, source }
    }
}
