//! Batch driver: reads one experiment config, runs it, writes CSV/JSON files.
//!
//! Exit codes: 0 success (including recorded verdicts), 1 validation or I/O
//! error, 2 numeric divergence, 3 a checked criterion failed.

pub mod commands;
pub mod config;
pub mod output;
pub mod systems;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use config::ExperimentConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] oscavg_core::Error),
}

impl CliError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        CliError::Io { path: path.to_path_buf(), message: e.to_string() }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(oscavg_core::Error::Divergence { .. } | oscavg_core::Error::NonFinite(_)) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Ok,
    Diverged,
    CriterionFailed,
}

impl Verdict {
    pub fn exit_code(self) -> u8 {
        match self {
            Verdict::Ok => 0,
            Verdict::Diverged => 2,
            Verdict::CriterionFailed => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// One human-readable line.
    pub summary: String,
    pub verdict: Verdict,
}

/// Runs a validated config, writing into `out_dir` (created if missing).
pub fn run(config: &ExperimentConfig, out_dir: &Path) -> Result<Outcome, CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    match config {
        ExperimentConfig::Simulate(c) => commands::simulate(c, out_dir),
        ExperimentConfig::AverageCheck(c) => commands::average_check(c, out_dir),
        ExperimentConfig::Sweep(c) => commands::sweep(c, out_dir),
        ExperimentConfig::StabilityProbe(c) => commands::stability_probe(c, out_dir),
        ExperimentConfig::BvpCheck(c) => commands::bvp_check(c, out_dir),
        ExperimentConfig::LyapunovCheck(c) => commands::lyapunov_check(c, out_dir),
    }
}
