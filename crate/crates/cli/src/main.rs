use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dqe_cli::commands::{self, EvalReference};
use dqe_cli::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "dqe",
    version,
    about = "Segmentation quality estimation from center-of-mass slices"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic phantom dataset with degraded segmentations and proxy ratings.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        exams: Option<usize>,
        #[arg(long)]
        segs_per_exam: Option<usize>,
    },
    /// Split, train and evaluate on the held-out exams.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Ratings CSV (default: <data>/ratings.csv).
        #[arg(long)]
        ratings: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Predict quality for every candidate segmentation of the given exams.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Dataset root, used when no exam directories are listed.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Exam directories.
        exams: Vec<PathBuf>,
    },
    /// Score predictions against ratings or ground-truth segmentations.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Predictions CSV written by `infer`.
        #[arg(long)]
        predictions: PathBuf,
        /// Compare against mean ratings from this CSV.
        #[arg(long, conflicts_with = "data")]
        ratings: Option<PathBuf>,
        /// Compare against the ground-truth segmentations under this dataset root.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        tolerance_mm: Option<f64>,
    },
    /// Partition every candidate under the dataset root by predicted quality.
    Curate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
}

fn base_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut config = RunConfig::load_or_default(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        config.set_seed(seed);
    }
    if let Some(out) = &common.out {
        config.out_dir = Some(out.clone());
    }
    Ok(config)
}

fn override_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    dqe_cli::init_workers()?;
    match cli.command {
        Command::Synth {
            common,
            exams,
            segs_per_exam,
        } => {
            let mut config = base_config(&common)?;
            config.synth.n_exams = exams.unwrap_or(config.synth.n_exams);
            config.synth.segs_per_exam = segs_per_exam.unwrap_or(config.synth.segs_per_exam);
            let out = commands::synth(&config)?;
            println!(
                "wrote {} exams x {} segmentations to {}",
                config.synth.n_exams,
                config.synth.segs_per_exam,
                out.display()
            );
        }
        Command::Train {
            common,
            data,
            ratings,
            epochs,
            batch_size,
        } => {
            let mut config = base_config(&common)?;
            override_path(&mut config.data_root, data);
            override_path(&mut config.ratings, ratings);
            config.train.epochs = epochs.unwrap_or(config.train.epochs);
            config.train.batch_size = batch_size.unwrap_or(config.train.batch_size);
            let total = config.train.epochs;
            let s = commands::train(&config, |e, loss| {
                eprintln!("epoch {}/{total} loss {loss:.5}", e + 1)
            })?;
            let r = s
                .pearson_r
                .map_or_else(|| "undefined".into(), |r| format!("{r:.4}"));
            println!(
                "train {} / test {} exams; held-out MAE {:.4} RMSE {:.4} Pearson r {r}",
                s.train_exams, s.test_exams, s.mae, s.rmse
            );
        }
        Command::Infer {
            common,
            checkpoint,
            data,
            exams,
        } => {
            let mut config = base_config(&common)?;
            override_path(&mut config.checkpoint, checkpoint);
            override_path(&mut config.data_root, data);
            let estimates = commands::infer(&config, &exams)?;
            println!("wrote {} estimates", estimates.len());
        }
        Command::Eval {
            common,
            predictions,
            ratings,
            data,
            tolerance_mm,
        } => {
            let mut config = base_config(&common)?;
            config.tolerance_mm = tolerance_mm.unwrap_or(config.tolerance_mm);
            override_path(&mut config.ratings, ratings);
            override_path(&mut config.data_root, data.clone());
            let reference = match (&config.ratings, data) {
                (Some(r), None) => EvalReference::Ratings(r),
                (_, Some(_)) => EvalReference::Segmentations(config.data_root()?),
                (None, None) => EvalReference::Segmentations(config.data_root()?),
            };
            print!("{}", commands::eval(&config, &predictions, reference)?);
        }
        Command::Curate {
            common,
            checkpoint,
            data,
            threshold,
        } => {
            let mut config = base_config(&common)?;
            override_path(&mut config.checkpoint, checkpoint);
            override_path(&mut config.data_root, data);
            if threshold.is_some() {
                config.threshold = threshold;
            }
            let s = commands::curate(&config)?;
            println!("kept {}, rejected {}", s.kept, s.rejected);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
