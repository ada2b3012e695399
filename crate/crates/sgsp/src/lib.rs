//! Experiment runner for the speaker-poisoning simulator: configuration,
//! artifact files, result tables and the stage pipeline behind the `sgsp`
//! binary.

use std::path::Path;

pub mod artifact;
pub mod config;
pub mod manifest;
pub mod pipeline;
pub mod tables;

pub use config::ExperimentConfig;
pub use pipeline::{reproduce, Bundle, SettingResult};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("{path} was produced by a different configuration (stage key {found}, expected {expected})")]
    Stale { path: String, found: String, expected: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: String, source: sgsp_core::Error },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

impl RunError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        RunError::Io { path: path.display().to_string(), source }
    }

    pub fn stage(stage: impl Into<String>) -> impl FnOnce(sgsp_core::Error) -> Self {
        let stage = stage.into();
        move |source| RunError::Stage { stage, source }
    }

    /// 3 config, 4 stage or artifact failure, 5 gradient check. Usage errors
    /// exit with 2 from the argument parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 3,
            RunError::Io { .. } | RunError::Artifact(_) | RunError::Stale { .. } | RunError::Stage { .. } => 4,
            RunError::GradCheck(_) => 5,
        }
    }
}
