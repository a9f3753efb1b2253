//! Command-line pipeline for segmentation quality estimation: synthesize
//! phantom data, train, predict, evaluate and curate.

pub mod commands;
pub mod config;
pub mod dataset;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{what} not found: {}", path.display())]
    MissingPath { what: &'static str, path: PathBuf },
    #[error("missing setting '{0}': pass it as a flag or set it in the config file")]
    MissingSetting(&'static str),
    #[error("output directory {} already exists and is not empty", .0.display())]
    OutputExists(PathBuf),
    #[error("no candidate segmentations (seg_<id>.nii.gz) found under {}", .0.display())]
    NoCandidates(PathBuf),
    #[error("predictions and references share no (exam_id, seg_id) keys")]
    EmptyJoin,
    #[error("{count} prediction(s) have no matching reference, e.g. {example}")]
    KeyMismatch { count: usize, example: String },
    #[error("DQE_NUM_WORKERS must be a positive integer, got '{0}'")]
    InvalidWorkers(String),
}

/// Sizes the global worker pool from `DQE_NUM_WORKERS` when it is set.
pub fn init_workers() -> anyhow::Result<()> {
    let Ok(value) = std::env::var("DQE_NUM_WORKERS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::InvalidWorkers(value.clone()))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}
