//! The five subcommands. Each validates its inputs before doing any work and
//! writes every output file atomically.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::Context;
use dqe::infer::{
    curate_estimates, predict_exam, read_estimates, write_estimates, write_report, QualityEstimate,
};
use dqe::io::{format_sig9, write_atomic};
use dqe::metrics::{
    bland_altman, dice, mae, pearson_r, rmse, scatter_csv, surface_dice, PairedSeries,
};
use dqe::net::{load_checkpoint, save_checkpoint, train_with_progress, TrainSample};
use dqe::ratings::{read_csv, split_dataset, RatingSet, SegKey};
use dqe::synth::{export_dataset, generate_dataset};

use crate::config::{require_file, RunConfig};
use crate::dataset::{load_all, scan, ExamDir};
use crate::CliError;

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn create_out_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("creating output directory {}", dir.display()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), format_sig9)
}

/// `metric,value` rows; undefined values are written as `undefined`.
pub fn metrics_csv(rows: &[(&str, Option<f64>)]) -> String {
    let mut out = String::from("metric,value\n");
    for (name, value) in rows {
        out.push_str(&format!("{name},{}\n", fmt_opt(*value)));
    }
    out
}

fn regression_rows(series: &PairedSeries) -> Vec<(&'static str, Option<f64>)> {
    let ba = bland_altman(series);
    vec![
        ("n", Some(series.len() as f64)),
        ("mae", Some(mae(series))),
        ("rmse", Some(rmse(series))),
        ("pearson_r", pearson_r(series).ok()),
        ("bland_altman_mean_diff", Some(ba.mean_diff)),
        ("bland_altman_sd_diff", Some(ba.sd_diff)),
        ("bland_altman_loa_low", Some(ba.loa_low)),
        ("bland_altman_loa_high", Some(ba.loa_high)),
    ]
}

/// Writes a phantom dataset to `out_dir`, which must not exist or be empty.
///
/// Files are assembled in a temporary sibling directory that is renamed into
/// place only after everything has been written.
pub fn synth(config: &RunConfig) -> anyhow::Result<PathBuf> {
    let out = config.out_dir()?.to_path_buf();
    if out.exists() {
        let empty = out.is_dir() && std::fs::read_dir(&out)?.next().is_none();
        if !empty {
            return Err(CliError::OutputExists(out).into());
        }
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    create_out_dir(&parent)?;
    let s = &config.synth;
    let data = generate_dataset(s.n_exams, s.segs_per_exam, &s.phantom, config.seed)?;
    let staging = tempfile::Builder::new()
        .prefix(".dqe-synth-")
        .tempdir_in(&parent)
        .with_context(|| format!("creating a staging directory in {}", parent.display()))?;
    export_dataset(&data, staging.path(), s.raters)?;
    if out.exists() {
        std::fs::remove_dir(&out).with_context(|| format!("replacing empty {}", out.display()))?;
    }
    let staged = staging.keep();
    std::fs::rename(&staged, &out)
        .with_context(|| format!("moving dataset into {}", out.display()))?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub train_exams: usize,
    pub test_exams: usize,
    pub mae: f64,
    pub rmse: f64,
    pub pearson_r: Option<f64>,
}

/// Splits the rated exams, trains, and evaluates on the held-out exams.
///
/// Writes `model.ckpt`, `history.csv`, `split.csv`, `estimates.csv` (held-out
/// predictions), `report.csv` and `scatter.csv` to the output directory.
pub fn train(
    config: &RunConfig,
    mut progress: impl FnMut(usize, f64),
) -> anyhow::Result<TrainSummary> {
    let root = config.data_root()?;
    let ratings_path = config.ratings_path()?;
    require_file("ratings CSV", &ratings_path)?;
    let out = config.out_dir()?;
    config.train.validate()?;
    let exams = scan(root)?;
    create_out_dir(out)?;

    let ratings = RatingSet::new(read_csv(&ratings_path)?);
    let on_disk: HashSet<(String, String)> = exams
        .iter()
        .flat_map(|e| {
            e.seg_ids
                .iter()
                .map(move |s| (e.exam_id.clone(), s.clone()))
        })
        .collect();
    if let Some(missing) = ratings
        .aggregates
        .keys()
        .find(|k| !on_disk.contains(&(k.exam_id.clone(), k.seg_id.clone())))
    {
        return Err(CliError::MissingPath {
            what: "rated segmentation",
            path: root
                .join(&missing.exam_id)
                .join(format!("seg_{}.nii.gz", missing.seg_id)),
        }
        .into());
    }
    let (train_ids, test_ids) =
        split_dataset(&ratings.exam_ids(), config.train_fraction, config.seed)?;
    let rated = |e: &ExamDir, seg: &str| {
        ratings
            .aggregates
            .contains_key(&SegKey::new(&e.exam_id, seg))
    };
    let label = |exam_id: &str, seg_id: &str| -> anyhow::Result<f64> {
        Ok(ratings.get(&SegKey::new(exam_id, seg_id))?.mean_stars)
    };

    let side = |ids: &[String]| -> Vec<ExamDir> {
        exams
            .iter()
            .filter(|e| ids.contains(&e.exam_id))
            .cloned()
            .collect()
    };
    let tc = &config.train;
    let mut samples = Vec::new();
    for c in load_all(&side(&train_ids), rated)? {
        samples.extend(TrainSample::views_of(
            &c.exam,
            tc.encoding,
            tc.normalization,
            label(&c.exam.exam_id, &c.seg_id)?,
        ));
    }
    let model = train_with_progress(&samples, tc, &mut progress)?;
    save_checkpoint(&model, &out.join("model.ckpt"))?;

    let mut history = String::from("epoch,loss\n");
    for (i, l) in model.history.iter().enumerate() {
        history.push_str(&format!("{},{}\n", i + 1, format_sig9(*l)));
    }
    write_text(&out.join("history.csv"), &history)?;
    let mut split = String::from("exam_id,side\n");
    for (ids, name) in [(&train_ids, "train"), (&test_ids, "test")] {
        for id in ids {
            split.push_str(&format!("{id},{name}\n"));
        }
    }
    write_text(&out.join("split.csv"), &split)?;

    let mut estimates = Vec::new();
    let mut references = Vec::new();
    for c in load_all(&side(&test_ids), rated)? {
        estimates.push(predict_exam(&model, &c.exam, &c.seg_id)?);
        references.push(label(&c.exam.exam_id, &c.seg_id)?);
    }
    write_estimates(&out.join("estimates.csv"), &estimates)?;
    let series = PairedSeries::new(estimates.iter().map(|e| e.stars_mean).collect(), references)?;
    write_text(
        &out.join("report.csv"),
        &metrics_csv(&regression_rows(&series)),
    )?;
    write_text(&out.join("scatter.csv"), &scatter_csv(&series))?;
    Ok(TrainSummary {
        train_exams: train_ids.len(),
        test_exams: test_ids.len(),
        mae: mae(&series),
        rmse: rmse(&series),
        pearson_r: pearson_r(&series).ok(),
    })
}

/// Predicts every candidate segmentation of the given exam directories and
/// writes `estimates.csv`.
pub fn infer(config: &RunConfig, exam_dirs: &[PathBuf]) -> anyhow::Result<Vec<QualityEstimate>> {
    let ckpt_path = config.checkpoint()?;
    require_file("checkpoint", ckpt_path)?;
    let out = config.out_dir()?;
    let dirs = if exam_dirs.is_empty() {
        scan(config.data_root()?)?
    } else {
        exam_dirs
            .iter()
            .map(|d| {
                crate::config::require_dir("exam directory", d)?;
                ExamDir::open(d)
            })
            .collect::<anyhow::Result<Vec<_>>>()?
    };
    if let Some(empty) = dirs.iter().find(|d| d.seg_ids.is_empty()) {
        return Err(CliError::NoCandidates(empty.dir.clone()).into());
    }
    let model = load_checkpoint(ckpt_path)?;
    create_out_dir(out)?;
    let estimates = predict_all(&model, &dirs)?;
    write_estimates(&out.join("estimates.csv"), &estimates)?;
    Ok(estimates)
}

fn predict_all(
    model: &dqe::net::Checkpoint,
    dirs: &[ExamDir],
) -> anyhow::Result<Vec<QualityEstimate>> {
    use rayon::prelude::*;
    let loaded = load_all(dirs, |_, _| true)?;
    Ok(loaded
        .par_iter()
        .map(|c| predict_exam(model, &c.exam, &c.seg_id))
        .collect::<Result<Vec<_>, _>>()?)
}

/// What `eval` compares the predictions against.
pub enum EvalReference<'a> {
    /// Mean ratings from a ratings CSV.
    Ratings(&'a Path),
    /// Ground-truth segmentations under a dataset root.
    Segmentations(&'a Path),
}

fn join(
    predictions: &[QualityEstimate],
    has: impl Fn(&SegKey) -> bool,
) -> anyhow::Result<Vec<&QualityEstimate>> {
    let (joined, missing): (Vec<_>, Vec<_>) = predictions
        .iter()
        .partition(|e| has(&SegKey::new(&e.exam_id, &e.seg_id)));
    if joined.is_empty() {
        return Err(CliError::EmptyJoin.into());
    }
    if let Some(first) = missing.first() {
        return Err(CliError::KeyMismatch {
            count: missing.len(),
            example: format!("{}/{}", first.exam_id, first.seg_id),
        }
        .into());
    }
    Ok(joined)
}

/// Scores a predictions CSV against ratings or ground-truth segmentations.
///
/// Ratings mode writes `metrics.csv` and `scatter.csv`; segmentation mode
/// writes `cases.csv` (per-case DSC and surface DSC) and `metrics.csv` with the
/// correlation of the predicted mean stars with each.
pub fn eval(
    config: &RunConfig,
    predictions: &Path,
    reference: EvalReference<'_>,
) -> anyhow::Result<String> {
    require_file("predictions CSV", predictions)?;
    let out = config.out_dir()?;
    let estimates = read_estimates(predictions)?;
    match reference {
        EvalReference::Ratings(path) => {
            require_file("ratings CSV", path)?;
            let ratings = RatingSet::new(read_csv(path)?);
            let joined = join(&estimates, |k| ratings.aggregates.contains_key(k))?;
            let refs = joined
                .iter()
                .map(|e| Ok(ratings.get(&SegKey::new(&e.exam_id, &e.seg_id))?.mean_stars))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let series = PairedSeries::new(joined.iter().map(|e| e.stars_mean).collect(), refs)?;
            let text = metrics_csv(&regression_rows(&series));
            create_out_dir(out)?;
            write_text(&out.join("metrics.csv"), &text)?;
            write_text(&out.join("scatter.csv"), &scatter_csv(&series))?;
            Ok(text)
        }
        EvalReference::Segmentations(root) => {
            let tol = config.tolerance_mm;
            if !(tol >= 0.0) {
                return Err(dqe::metrics::MetricsError::NegativeTolerance(tol).into());
            }
            let exams: BTreeMap<String, ExamDir> = scan(root)?
                .into_iter()
                .map(|e| (e.exam_id.clone(), e))
                .collect();
            let joined = join(&estimates, |k| {
                exams
                    .get(&k.exam_id)
                    .is_some_and(|e| e.seg_ids.contains(&k.seg_id) && e.gt_path().is_file())
            })?;
            let mut cases = String::from("exam_id,seg_id,stars_mean,dsc,sdsc\n");
            let (mut stars, mut dscs, mut sdscs) = (Vec::new(), Vec::new(), Vec::new());
            for e in joined {
                let dir = &exams[&e.exam_id];
                let gt = dir.load_gt()?.whole_tumor();
                let seg_path = dir.seg_path(&e.seg_id);
                let cand = dqe::volume::nifti::read(&seg_path)
                    .and_then(|img| img.into_seg())
                    .with_context(|| format!("loading {}", seg_path.display()))?
                    .whole_tumor();
                let d = dice(&gt, &cand)?;
                let s = surface_dice(&gt, &cand, tol)?;
                cases.push_str(&format!(
                    "{},{},{},{},{}\n",
                    e.exam_id,
                    e.seg_id,
                    format_sig9(e.stars_mean),
                    format_sig9(d),
                    format_sig9(s)
                ));
                stars.push(e.stars_mean);
                dscs.push(d);
                sdscs.push(s);
            }
            let r_dsc = pearson_r(&PairedSeries::new(stars.clone(), dscs)?).ok();
            let r_sdsc = pearson_r(&PairedSeries::new(stars.clone(), sdscs)?).ok();
            let text = metrics_csv(&[
                ("n", Some(stars.len() as f64)),
                ("tolerance_mm", Some(tol)),
                ("pearson_r_dsc", r_dsc),
                ("pearson_r_sdsc", r_sdsc),
            ]);
            create_out_dir(out)?;
            write_text(&out.join("cases.csv"), &cases)?;
            write_text(&out.join("metrics.csv"), &text)?;
            Ok(text)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CurateSummary {
    pub kept: usize,
    pub rejected: usize,
}

fn manifest(items: &[QualityEstimate]) -> String {
    let mut out = String::from("exam_id,seg_id\n");
    for e in items {
        out.push_str(&format!("{},{}\n", e.exam_id, e.seg_id));
    }
    out
}

/// Gates every candidate under the dataset root at the threshold; writes
/// `kept.csv`, `rejected.csv` and `report.csv`.
pub fn curate(config: &RunConfig) -> anyhow::Result<CurateSummary> {
    let ckpt_path = config.checkpoint()?;
    require_file("checkpoint", ckpt_path)?;
    let threshold = config.threshold()?;
    dqe::infer::classify_quality(&QualityEstimate::from_views("", "", [1.0; 3]), threshold)?;
    let out = config.out_dir()?;
    let dirs = scan(config.data_root()?)?;
    let model = load_checkpoint(ckpt_path)?;
    create_out_dir(out)?;
    let curation = curate_estimates(predict_all(&model, &dirs)?, threshold)?;
    write_text(&out.join("kept.csv"), &manifest(&curation.kept))?;
    write_text(&out.join("rejected.csv"), &manifest(&curation.rejected))?;
    write_report(&out.join("report.csv"), &curation.report)?;
    Ok(CurateSummary {
        kept: curation.kept.len(),
        rejected: curation.rejected.len(),
    })
}
