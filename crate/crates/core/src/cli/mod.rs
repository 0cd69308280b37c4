//! Experiment harness: config parsing, the full pipeline and artifacts.

pub mod config;
mod run;

pub use config::{parse_config, validate_file, validate_text, ExperimentConfig, SchemaError, Validated};
pub use run::{
    coordinate_names, run_experiment, summarize_draws, verify_manifest, ArtifactEntry, Diagnostics, FieldError,
    RunManifest, RunOutput, RunSummary, StageError, StageTime,
};

use std::path::{Path, PathBuf};

/// Failure of a CLI verb, with its process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at {0}")]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Stage(#[from] StageError),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Schema(_) => 2,
            CliError::Stage(_) => 1,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub seed_override: Option<u64>,
}

/// Validates the config at `path` and runs the whole pipeline.
pub fn run(path: &Path, opts: &RunOptions) -> Result<RunOutput, CliError> {
    let Validated {
        mut config, problem, ..
    } = validate_file(path)?;
    if let Some(dir) = &opts.out_dir {
        config.output.dir = dir.clone();
    }
    if let Some(s) = opts.seed_override {
        config.override_seed(s);
    }
    Ok(run_experiment(&config, &problem)?)
}
