//! Pipeline orchestration: one config file drives corpus generation, LM
//! training, QA evaluation, extraction, probing grids, and report rendering,
//! reproducibly.

mod config;
mod manifest;
mod stages;

pub use config::{
    EvalConfig, Experiment, KnowledgeConfig, PcaToken, RunConfig, TrainCorpusConfig,
};
pub use manifest::{
    collect_outputs, read_manifest, sha256_hex, Manifest, RunLock, FAILED_DIR, LOCK_FILE,
    MANIFEST_FILE,
};
pub use stages::{cmd_all, cmd_eval_qa, cmd_extract, cmd_gen, cmd_probe, cmd_report, cmd_train};

use std::path::PathBuf;

use thiserror::Error;

/// Pipeline-level errors. `Stage` failures carry the stage name so the CLI
/// can abort with context (exit code 2); config problems are usage errors
/// (exit code 1).
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("output directory is locked by another pipeline ({0}); remove the lock if stale")]
    Locked(PathBuf),
    #[error("stage {stage} failed: {message}")]
    Stage {
        stage: &'static str,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// True for errors a user fixes by correcting invocation or config.
    pub fn is_usage(&self) -> bool {
        matches!(self, PipelineError::InvalidConfig(_))
    }
}
