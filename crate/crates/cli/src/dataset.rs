//! On-disk dataset layout:
//!
//! ```text
//! <root>/ratings.csv
//! <root>/<exam_id>/{t1,t1c,t2,flair}.nii.gz
//! <root>/<exam_id>/gt.nii.gz            (optional ground truth)
//! <root>/<exam_id>/seg_<seg_id>.nii.gz  (candidate segmentations)
//! ```

use std::path::{Path, PathBuf};

use anyhow::Context;
use dqe::volume::{load_exam, nifti, Exam, ModalityPaths};
use rayon::prelude::*;

use crate::CliError;

pub const GT_FILE: &str = "gt.nii.gz";

/// One exam directory and the candidate segmentation ids found in it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExamDir {
    pub exam_id: String,
    pub dir: PathBuf,
    pub seg_ids: Vec<String>,
}

impl ExamDir {
    /// Reads the directory listing of one exam.
    pub fn open(dir: &Path) -> anyhow::Result<Self> {
        let exam_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| anyhow::anyhow!("exam directory {} has no usable name", dir.display()))?
            .to_string();
        let mut seg_ids = Vec::new();
        for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
            let name = entry?.file_name();
            if let Some(id) = name
                .to_str()
                .and_then(|n| n.strip_prefix("seg_")?.strip_suffix(".nii.gz"))
            {
                seg_ids.push(id.to_string());
            }
        }
        seg_ids.sort();
        Ok(Self {
            exam_id,
            dir: dir.to_path_buf(),
            seg_ids,
        })
    }

    pub fn seg_path(&self, seg_id: &str) -> PathBuf {
        self.dir.join(format!("seg_{seg_id}.nii.gz"))
    }

    pub fn gt_path(&self) -> PathBuf {
        self.dir.join(GT_FILE)
    }

    /// The exam carrying each listed candidate; the MR volumes are read once.
    pub fn load_candidates(&self, seg_ids: &[String]) -> anyhow::Result<Vec<Exam>> {
        let Some(first) = seg_ids.first() else {
            return Ok(Vec::new());
        };
        let base = load_exam(
            &self.exam_id,
            &ModalityPaths::in_dir(&self.dir),
            &self.seg_path(first),
        )
        .with_context(|| format!("loading exam {}", self.exam_id))?;
        let mut out = Vec::with_capacity(seg_ids.len());
        for id in &seg_ids[1..] {
            let path = self.seg_path(id);
            let seg = nifti::read(&path)
                .and_then(|img| img.into_seg())
                .with_context(|| format!("loading {}", path.display()))?;
            out.push(
                base.with_seg(seg)
                    .with_context(|| format!("{} does not fit its exam", path.display()))?,
            );
        }
        out.insert(0, base);
        Ok(out)
    }

    pub fn load_gt(&self) -> anyhow::Result<dqe::volume::TissueSeg> {
        let path = self.gt_path();
        crate::config::require_file("ground-truth segmentation", &path)?;
        nifti::read(&path)
            .and_then(|img| img.into_seg())
            .with_context(|| format!("loading {}", path.display()))
    }
}

/// Exam directories under `root` (those holding a T1 volume), sorted by id.
pub fn scan(root: &Path) -> anyhow::Result<Vec<ExamDir>> {
    crate::config::require_dir("dataset root", root)?;
    let mut dirs = Vec::new();
    for entry in std::fs::read_dir(root).with_context(|| format!("listing {}", root.display()))? {
        let path = entry?.path();
        if path.is_dir() && path.join("t1.nii.gz").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    let exams = dirs
        .iter()
        .map(|d| ExamDir::open(d))
        .collect::<anyhow::Result<Vec<_>>>()?;
    if exams.iter().all(|e| e.seg_ids.is_empty()) {
        return Err(CliError::NoCandidates(root.to_path_buf()).into());
    }
    Ok(exams)
}

/// A loaded candidate: its exam (carrying the candidate segmentation) and seg id.
pub struct LoadedCandidate {
    pub exam: Exam,
    pub seg_id: String,
}

/// Loads the selected candidates of every exam in parallel, keeping exam order.
pub fn load_all(
    exams: &[ExamDir],
    select: impl Fn(&ExamDir, &str) -> bool + Sync,
) -> anyhow::Result<Vec<LoadedCandidate>> {
    let per_exam = exams
        .par_iter()
        .map(|e| {
            let ids: Vec<String> = e
                .seg_ids
                .iter()
                .filter(|id| select(e, id))
                .cloned()
                .collect();
            let loaded = e.load_candidates(&ids)?;
            Ok(loaded
                .into_iter()
                .zip(ids)
                .map(|(exam, seg_id)| LoadedCandidate { exam, seg_id })
                .collect::<Vec<_>>())
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(per_exam.into_iter().flatten().collect())
}
