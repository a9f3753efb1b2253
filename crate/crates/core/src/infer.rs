//! Multi-view quality prediction, threshold gating and dataset curation.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{format_sig9, write_atomic};
use crate::net::{Checkpoint, NetError};
use crate::ratings::{MAX_STARS, MIN_STARS};
use crate::volume::{extract_com_slices, Axis, Exam, SliceStack};

#[derive(Debug, thiserror::Error)]
pub enum InferError {
    #[error("input preprocessed with {found} but the model expects {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("threshold must lie in [1, 6], got {0}")]
    InvalidThreshold(f64),
    #[error("nothing to curate")]
    EmptyInput,
    #[error(transparent)]
    Net(NetError),
    #[error("{path}: {message}")]
    Csv { path: String, message: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl From<NetError> for InferError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::ConfigMismatch { expected, found } => {
                InferError::ConfigMismatch { expected, found }
            }
            other => InferError::Net(other),
        }
    }
}

pub type Result<T, E = InferError> = std::result::Result<T, E>;

/// Clamps a raw network output onto the star scale.
pub fn clamp_stars(raw: f64) -> f64 {
    raw.clamp(MIN_STARS as f64, MAX_STARS as f64)
}

/// Per-view scores (clamped) and their mean for one candidate segmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityEstimate {
    pub exam_id: String,
    pub seg_id: String,
    pub stars_axial: f64,
    pub stars_coronal: f64,
    pub stars_sagittal: f64,
    pub stars_mean: f64,
}

impl QualityEstimate {
    /// Builds an estimate from per-view scores in axial, coronal, sagittal order.
    pub fn from_views(
        exam_id: impl Into<String>,
        seg_id: impl Into<String>,
        views: [f64; 3],
    ) -> Self {
        let [a, c, s] = views.map(clamp_stars);
        Self {
            exam_id: exam_id.into(),
            seg_id: seg_id.into(),
            stars_axial: a,
            stars_coronal: c,
            stars_sagittal: s,
            stars_mean: (a + c + s) / 3.0,
        }
    }

    pub fn view(&self, axis: Axis) -> f64 {
        match axis {
            Axis::Axial => self.stars_axial,
            Axis::Coronal => self.stars_coronal,
            Axis::Sagittal => self.stars_sagittal,
        }
    }
}

/// Clamped prediction for one preprocessed view.
pub fn predict_view(model: &Checkpoint, stack: &SliceStack) -> Result<f64> {
    let raw = model.predict_raw(std::slice::from_ref(stack))?;
    Ok(clamp_stars(raw[0]))
}

/// The three center-of-mass views of `exam`, preprocessed as `model` expects.
pub fn exam_views(model: &Checkpoint, exam: &Exam) -> Vec<SliceStack> {
    Axis::ALL
        .iter()
        .map(|axis| {
            extract_com_slices(
                exam,
                *axis,
                model.config.encoding,
                model.config.normalization,
            )
        })
        .collect()
}

/// Predicts all three views of `exam` (whose segmentation is candidate `seg_id`).
pub fn predict_exam(model: &Checkpoint, exam: &Exam, seg_id: &str) -> Result<QualityEstimate> {
    let raw = model.predict_raw(&exam_views(model, exam))?;
    Ok(QualityEstimate::from_views(
        &exam.exam_id,
        seg_id,
        [raw[0], raw[1], raw[2]],
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Pass,
    Fail,
}

impl Decision {
    pub fn name(self) -> &'static str {
        match self {
            Decision::Pass => "pass",
            Decision::Fail => "fail",
        }
    }
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(MIN_STARS as f64..=MAX_STARS as f64).contains(&threshold) {
        return Err(InferError::InvalidThreshold(threshold));
    }
    Ok(())
}

/// Pass iff the mean score reaches the threshold (inclusive).
pub fn classify_quality(estimate: &QualityEstimate, threshold: f64) -> Result<Decision> {
    check_threshold(threshold)?;
    Ok(if estimate.stars_mean >= threshold {
        Decision::Pass
    } else {
        Decision::Fail
    })
}

/// A candidate segmentation paired with its exam.
#[derive(Clone, Debug)]
pub struct Candidate {
    pub exam: Exam,
    pub seg_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curation {
    pub kept: Vec<QualityEstimate>,
    pub rejected: Vec<QualityEstimate>,
    /// Every input item with its decision, in input order.
    pub report: Vec<(QualityEstimate, Decision)>,
}

/// Partitions precomputed estimates by [`classify_quality`].
pub fn curate_estimates(estimates: Vec<QualityEstimate>, threshold: f64) -> Result<Curation> {
    check_threshold(threshold)?;
    if estimates.is_empty() {
        return Err(InferError::EmptyInput);
    }
    let mut out = Curation {
        kept: Vec::new(),
        rejected: Vec::new(),
        report: Vec::with_capacity(estimates.len()),
    };
    for e in estimates {
        let d = classify_quality(&e, threshold)?;
        match d {
            Decision::Pass => out.kept.push(e.clone()),
            Decision::Fail => out.rejected.push(e.clone()),
        }
        out.report.push((e, d));
    }
    Ok(out)
}

/// Predicts every candidate (in parallel) and partitions them at `threshold`.
pub fn curate(candidates: &[Candidate], model: &Checkpoint, threshold: f64) -> Result<Curation> {
    check_threshold(threshold)?;
    if candidates.is_empty() {
        return Err(InferError::EmptyInput);
    }
    let estimates = candidates
        .par_iter()
        .map(|c| predict_exam(model, &c.exam, &c.seg_id))
        .collect::<Result<Vec<_>>>()?;
    curate_estimates(estimates, threshold)
}

pub const ESTIMATE_HEADER: &str =
    "exam_id,seg_id,stars_axial,stars_coronal,stars_sagittal,stars_mean";
pub const REPORT_HEADER: &str =
    "exam_id,seg_id,stars_axial,stars_coronal,stars_sagittal,stars_mean,decision";

fn estimate_fields(e: &QualityEstimate) -> String {
    format!(
        "{},{},{},{},{},{}",
        e.exam_id,
        e.seg_id,
        format_sig9(e.stars_axial),
        format_sig9(e.stars_coronal),
        format_sig9(e.stars_sagittal),
        format_sig9(e.stars_mean)
    )
}

pub fn estimates_csv(estimates: &[QualityEstimate]) -> String {
    let mut out = format!("{ESTIMATE_HEADER}\n");
    for e in estimates {
        out.push_str(&estimate_fields(e));
        out.push('\n');
    }
    out
}

pub fn report_csv(report: &[(QualityEstimate, Decision)]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for (e, d) in report {
        out.push_str(&format!("{},{}\n", estimate_fields(e), d));
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes()).map_err(|source| InferError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write_estimates(path: &Path, estimates: &[QualityEstimate]) -> Result<()> {
    write_text(path, &estimates_csv(estimates))
}

pub fn write_report(path: &Path, report: &[(QualityEstimate, Decision)]) -> Result<()> {
    write_text(path, &report_csv(report))
}

/// Reads an estimates or curation-report CSV (extra columns are ignored).
pub fn read_estimates(path: &Path) -> Result<Vec<QualityEstimate>> {
    let err = |message: String| InferError::Csv {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<QualityEstimate>() {
        out.push(row.map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn est(mean_views: [f64; 3]) -> QualityEstimate {
        QualityEstimate::from_views("e", "s", mean_views)
    }

    #[test]
    fn mean_and_clamp() {
        assert_eq!(est([3.0, 4.0, 5.0]).stars_mean, 4.0);
        assert_eq!(est([2.5; 3]).stars_mean, 2.5);
        assert_eq!(clamp_stars(7.3), 6.0);
        assert_eq!(clamp_stars(-1.0), 1.0);
        let e = est([7.3, 0.2, 4.0]);
        assert_eq!((e.stars_axial, e.stars_coronal), (6.0, 1.0));
        assert_eq!(clamp_stars(clamp_stars(7.3)), clamp_stars(7.3));
    }

    #[test]
    fn threshold_is_inclusive() {
        assert_eq!(
            classify_quality(&est([5.2; 3]), 4.0).unwrap(),
            Decision::Pass
        );
        assert_eq!(
            classify_quality(&est([2.1; 3]), 4.0).unwrap(),
            Decision::Fail
        );
        assert_eq!(
            classify_quality(&est([4.0; 3]), 4.0).unwrap(),
            Decision::Pass
        );
        assert!(matches!(
            classify_quality(&est([4.0; 3]), 0.5),
            Err(InferError::InvalidThreshold(_))
        ));
    }

    #[test]
    fn curation_partitions_input() {
        let all: Vec<_> = [1.0, 2.5, 4.0, 5.5, 6.0]
            .iter()
            .map(|s| est([*s; 3]))
            .collect();
        let c = curate_estimates(all.clone(), 4.0).unwrap();
        assert_eq!((c.kept.len(), c.rejected.len(), c.report.len()), (3, 2, 5));
        assert!(curate_estimates(all.clone(), 1.0)
            .unwrap()
            .rejected
            .is_empty());
        assert!(matches!(
            curate_estimates(vec![], 3.0),
            Err(InferError::EmptyInput)
        ));
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let items = vec![
            (est([3.0, 4.0, 5.0]), Decision::Pass),
            (est([1.0; 3]), Decision::Fail),
        ];
        write_report(&path, &items).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(REPORT_HEADER));
        assert!(text.contains("e,s,3,4,5,4,pass"));
        let back = read_estimates(&path).unwrap();
        assert_eq!(back, items.into_iter().map(|(e, _)| e).collect::<Vec<_>>());
    }
}
