//! Run configuration: a TOML file whose values command-line flags override.

use std::path::{Path, PathBuf};

use anyhow::Context;
use dqe::metrics::DEFAULT_TOLERANCE_MM;
use dqe::net::TrainConfig;
use dqe::synth::PhantomParams;
use serde::{Deserialize, Serialize};

use crate::CliError;

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE_MM
}

fn default_train_fraction() -> f64 {
    0.8
}

/// Synthetic dataset dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_exams: usize,
    pub segs_per_exam: usize,
    /// Pseudo-raters per view in the exported ratings CSV.
    pub raters: usize,
    pub phantom: PhantomParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_exams: 75,
            segs_per_exam: 4,
            raters: 10,
            phantom: PhantomParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for dataset synthesis and the train/test split.
    #[serde(default)]
    pub seed: u64,
    /// Dataset root holding one directory per exam.
    #[serde(default)]
    pub data_root: Option<PathBuf>,
    /// Ratings CSV; defaults to `<data_root>/ratings.csv`.
    #[serde(default)]
    pub ratings: Option<PathBuf>,
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default = "default_tolerance")]
    pub tolerance_mm: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_root: None,
            ratings: None,
            checkpoint: None,
            out_dir: None,
            threshold: None,
            tolerance_mm: default_tolerance(),
            train_fraction: default_train_fraction(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        require_file("config file", path)?;
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// The config at `path`, or the defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Applies `--seed`, which seeds synthesis, splitting and weight initialization.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn data_root(&self) -> Result<&Path, CliError> {
        self.data_root
            .as_deref()
            .ok_or(CliError::MissingSetting("data_root"))
    }

    pub fn ratings_path(&self) -> Result<PathBuf, CliError> {
        match &self.ratings {
            Some(p) => Ok(p.clone()),
            None => Ok(self.data_root()?.join("ratings.csv")),
        }
    }

    pub fn checkpoint(&self) -> Result<&Path, CliError> {
        self.checkpoint
            .as_deref()
            .ok_or(CliError::MissingSetting("checkpoint"))
    }

    pub fn out_dir(&self) -> Result<&Path, CliError> {
        self.out_dir
            .as_deref()
            .ok_or(CliError::MissingSetting("out_dir"))
    }

    pub fn threshold(&self) -> Result<f64, CliError> {
        self.threshold.ok_or(CliError::MissingSetting("threshold"))
    }
}

pub fn require_file(what: &'static str, path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingPath {
            what,
            path: path.to_path_buf(),
        })
    }
}

pub fn require_dir(what: &'static str, path: &Path) -> Result<(), CliError> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::MissingPath {
            what,
            path: path.to_path_buf(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("seed = 1\nbogus = 2\n").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\narch = \"dense121\"\noptimizer = \"adamw\"\nnormalization = \"minmax\"\nencoding = \"single\"\nextra = 1\n").is_err());
        assert!(toml::from_str::<RunConfig>("[synth]\nn_exams = 3\ncolour = 1\n").is_err());
    }

    #[test]
    fn defaults_and_round_trip() {
        let c: RunConfig = toml::from_str("threshold = 4.0\n[synth]\nn_exams = 3\n").unwrap();
        assert_eq!(
            (c.threshold, c.synth.n_exams, c.synth.segs_per_exam),
            (Some(4.0), 3, 4)
        );
        assert_eq!(c.train, TrainConfig::default());
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<RunConfig>(&text).unwrap(), c);
    }

    #[test]
    fn documented_example_parses() {
        let c: RunConfig = toml::from_str(
            r#"
seed = 1
data_root = "data"
out_dir = "run"
threshold = 4.0
tolerance_mm = 1.0
train_fraction = 0.8

[train]
arch = "dense121"
optimizer = "ranger21"
normalization = "percentile"
encoding = "brats"
learning_rate = 1e-3
batch_size = 80
epochs = 500
input_size = [64, 64]

[train.augment]
seed = 0
flip.probability = 0.5
bias_field.probability = 0.5

[synth]
n_exams = 75
segs_per_exam = 4
raters = 10
"#,
        )
        .unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.data_root.as_deref(), Some(Path::new("data")));
    }

    #[test]
    fn seed_flag_reaches_training() {
        let mut c = RunConfig::default();
        c.set_seed(9);
        assert_eq!((c.seed, c.train.seed), (9, 9));
    }
}
