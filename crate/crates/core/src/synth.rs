//! Synthetic phantom exams, controlled segmentation degradation and proxy ratings.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::metrics::{self, MetricsError};
use crate::ratings::{RatingRecord, RatingsError};
use crate::volume::{
    nifti, Axis, AxisMap, Exam, Grid3, ModalityPaths, TissueSeg, Volume3D, VolumeError,
    LABEL_EDEMA, LABEL_ENHANCING, LABEL_NECROSIS,
};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid phantom parameters: {0}")]
    InvalidParams(String),
    #[error("severity must lie in [0, 1], got {0}")]
    InvalidSeverity(f64),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Ratings(#[from] RatingsError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

/// Tissue classes with distinct intensity profiles.
pub const TISSUES: [&str; 5] = ["background", "brain", "necrosis", "enhancing", "edema"];

/// Mean and standard deviation of one tissue in one modality.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TissueIntensity {
    pub mean: f64,
    pub sigma: f64,
}

const fn ti(mean: f64, sigma: f64) -> TissueIntensity {
    TissueIntensity { mean, sigma }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Tumor-core radius range in voxels.
    pub radius_range: [f64; 2],
    /// Necrosis radius as a fraction of the tumor-core radius.
    pub core_fraction: f64,
    /// Enhancing-rim outer radius as a fraction of the tumor-core radius.
    pub rim_fraction: f64,
    /// Edema extent beyond the tumor core, as a fraction of its radius.
    pub halo_fraction: f64,
    /// Amplitude of the radial surface perturbation (0 keeps an ellipsoid).
    pub deformation: f64,
    /// Per-modality (T1, T1c, T2, FLAIR) intensities, indexed by [`TISSUES`].
    pub intensities: [[TissueIntensity; 5]; 4],
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        Self {
            shape: [32, 32, 32],
            spacing: [1.0; 3],
            radius_range: [4.0, 7.0],
            core_fraction: 0.45,
            rim_fraction: 1.0,
            halo_fraction: 0.4,
            deformation: 0.25,
            intensities: [
                [
                    ti(0.0, 0.01),
                    ti(0.60, 0.04),
                    ti(0.30, 0.04),
                    ti(0.55, 0.04),
                    ti(0.50, 0.04),
                ],
                [
                    ti(0.0, 0.01),
                    ti(0.60, 0.04),
                    ti(0.30, 0.04),
                    ti(1.00, 0.05),
                    ti(0.50, 0.04),
                ],
                [
                    ti(0.0, 0.01),
                    ti(0.50, 0.04),
                    ti(1.00, 0.05),
                    ti(0.70, 0.04),
                    ti(0.90, 0.04),
                ],
                [
                    ti(0.0, 0.01),
                    ti(0.45, 0.04),
                    ti(0.35, 0.04),
                    ti(0.70, 0.04),
                    ti(1.00, 0.05),
                ],
            ],
            seed: 0,
        }
    }
}

impl PhantomParams {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::InvalidParams(m));
        if self.shape.iter().any(|n| *n < 4) {
            return bad(format!(
                "every grid extent must be at least 4, got {:?}",
                self.shape
            ));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad(format!("spacing must be positive, got {:?}", self.spacing));
        }
        let [r0, r1] = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return bad(format!(
                "radius range must satisfy 0 < low <= high, got {:?}",
                self.radius_range
            ));
        }
        let nested = 0.0 < self.core_fraction
            && self.core_fraction < self.rim_fraction
            && self.rim_fraction <= 1.0
            && self.halo_fraction > 0.0
            && self.halo_fraction.is_finite();
        if !nested {
            return bad(format!(
                "shell fractions must satisfy 0 < core < rim <= 1 and halo > 0, got core {}, rim {}, halo {}",
                self.core_fraction, self.rim_fraction, self.halo_fraction
            ));
        }
        if !(self.deformation >= 0.0 && self.deformation < 1.0) {
            return bad(format!(
                "deformation must lie in [0, 1), got {}",
                self.deformation
            ));
        }
        let finite = self
            .intensities
            .iter()
            .flatten()
            .all(|t| t.mean.is_finite() && t.sigma.is_finite() && t.sigma >= 0.0);
        if !finite {
            return bad("intensity means must be finite and sigmas nonnegative".into());
        }
        Ok(())
    }

    /// Outer radius of the labelled tumor for core radius `r`.
    pub fn max_extent(&self, r: f64) -> f64 {
        r * (self.rim_fraction.max(1.0) + self.halo_fraction)
    }
}

/// Tissue class per voxel (index into [`TISSUES`]) and the tumor center.
fn tissue_map(params: &PhantomParams, rng: &mut ChaCha8Rng) -> (Vec<u8>, [f64; 3]) {
    let [nx, ny, nz] = params.shape;
    let [r0, r1] = params.radius_range;
    let r = if r0 == r1 {
        r0
    } else {
        rng.random_range(r0..=r1)
    };
    let extent = params.max_extent(r);
    let mut center = [0.0; 3];
    for (a, n) in params.shape.iter().enumerate() {
        let mid = (*n as f64 - 1.0) / 2.0;
        let (lo, hi) = (extent + 1.0, *n as f64 - 2.0 - extent);
        // keep the tumor inside the brain ellipsoid when the grid allows it
        let jitter = (0.2 * *n as f64).min(((hi - lo) / 2.0).max(0.0));
        center[a] = if jitter > 0.0 {
            mid + rng.random_range(-jitter..=jitter)
        } else {
            mid
        };
    }
    // semi-axis scales <= 1 and a nonnegative surface bump only shrink the
    // shells, so every labelled voxel lies within `extent` of the center
    let axes: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.75..=1.0));
    let (k1, k2) = (
        rng.random_range(1..=3) as f64,
        rng.random_range(1..=3) as f64,
    );
    let (p1, p2) = (
        rng.random_range(0.0..2.0 * PI),
        rng.random_range(0.0..2.0 * PI),
    );
    let brain: [f64; 3] = std::array::from_fn(|a| 0.47 * params.shape[a] as f64);
    let mid: [f64; 3] = std::array::from_fn(|a| (params.shape[a] as f64 - 1.0) / 2.0);
    let mut out = vec![0u8; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let i = x + nx * (y + ny * z);
                let in_brain = (0..3)
                    .map(|a| ((p[a] - mid[a]) / brain[a]).powi(2))
                    .sum::<f64>()
                    <= 1.0;
                let d: [f64; 3] = std::array::from_fn(|a| p[a] - center[a]);
                let scaled = (0..3).map(|a| (d[a] / axes[a]).powi(2)).sum::<f64>().sqrt();
                let theta = d[1].atan2(d[0]);
                let phi = (d[2] / scaled.max(1e-9)).clamp(-1.0, 1.0).acos();
                let bump = 0.5 + 0.5 * (k1 * theta + p1).sin() * (k2 * phi + p2).cos();
                let rho = scaled / r * (1.0 + params.deformation * bump);
                out[i] = if rho <= params.core_fraction {
                    2
                } else if rho <= params.rim_fraction {
                    3
                } else if rho <= params.rim_fraction.max(1.0) + params.halo_fraction {
                    4
                } else if in_brain {
                    1
                } else {
                    0
                };
            }
        }
    }
    (out, center)
}

const TISSUE_LABEL: [u8; 5] = [0, 0, LABEL_NECROSIS, LABEL_ENHANCING, LABEL_EDEMA];

/// Generates a phantom exam whose segmentation is the construction ground truth.
pub fn generate_phantom(params: &PhantomParams) -> Result<Exam> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (tissue, _) = tissue_map(params, &mut rng);
    let standard = Normal::new(0.0, 1.0).expect("unit normal");
    let modalities: Vec<Volume3D> = params
        .intensities
        .iter()
        .map(|profile| {
            let data: Vec<f32> = tissue
                .iter()
                .map(|t| {
                    let p = profile[*t as usize];
                    (p.mean + p.sigma * standard.sample(&mut rng)) as f32
                })
                .collect();
            Grid3::new(params.shape, params.spacing, data)
        })
        .collect::<Result<_, _>>()?;
    let labels = tissue.iter().map(|t| TISSUE_LABEL[*t as usize]).collect();
    let seg = TissueSeg::new(Grid3::new(params.shape, params.spacing, labels)?)?;
    let modalities: [Volume3D; 4] = modalities.try_into().expect("four modalities");
    Ok(Exam::new(
        format!("phantom{}", params.seed),
        modalities,
        seg,
        AxisMap::default(),
    )?)
}

const OFFSETS6: [[isize; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

fn neighbour(shape: [usize; 3], c: [usize; 3], d: [isize; 3]) -> Option<usize> {
    let mut n = [0usize; 3];
    for a in 0..3 {
        let v = c[a] as isize + d[a];
        if v < 0 || v >= shape[a] as isize {
            return None;
        }
        n[a] = v as usize;
    }
    Some(n[0] + shape[0] * (n[1] + shape[1] * n[2]))
}

/// One step of 6-connected dilation (grown voxels copy a neighbour's label)
/// or erosion (foreground voxels touching background are cleared).
fn morph_step(grid: &Grid3<u8>, dilate: bool) -> Vec<u8> {
    let mut out = grid.data.clone();
    for (i, &v) in grid.data.iter().enumerate() {
        let c = grid.coords(i);
        let neighbours = OFFSETS6.iter().map(|d| neighbour(grid.shape, c, *d));
        if dilate && v == 0 {
            if let Some(label) = neighbours.flatten().map(|j| grid.data[j]).find(|l| *l != 0) {
                out[i] = label;
            }
        } else if !dilate
            && v != 0
            && neighbours
                .map(|j| j.map_or(0, |j| grid.data[j]))
                .any(|l| l == 0)
        {
            out[i] = 0;
        }
    }
    out
}

fn shifted(grid: &Grid3<u8>, offset: [isize; 3]) -> Vec<u8> {
    let mut out = vec![0u8; grid.data.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let c = grid.coords(i);
        let back = [-offset[0], -offset[1], -offset[2]];
        if let Some(j) = neighbour(grid.shape, c, back) {
            *o = grid.data[j];
        }
    }
    out
}

/// Applies severity-scaled corruptions: boundary erosion or dilation, a rigid
/// shift, tumor-class swaps and octant dropout, all sized relative to the
/// whole-tumor equivalent-sphere radius. Severity 0 returns the input.
pub fn degrade_segmentation(seg: &TissueSeg, severity: f64, seed: u64) -> Result<TissueSeg> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(SynthError::InvalidSeverity(severity));
    }
    if severity == 0.0 {
        return Ok(seg.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = seg.grid().clone();
    let tumor: Vec<usize> = (0..grid.data.len())
        .filter(|i| grid.data[*i] != 0)
        .collect();
    let radius = (3.0 * tumor.len() as f64 / (4.0 * PI)).cbrt();

    let steps = (severity * 0.3 * radius).round() as usize;
    let dilate = rng.random_bool(0.5);
    for _ in 0..steps {
        grid.data = morph_step(&grid, dilate);
    }

    let shift = severity * 0.6 * radius;
    let (u, v): (f64, f64) = (
        rng.random_range(-1.0..=1.0),
        rng.random_range(0.0..2.0 * PI),
    );
    let s = (1.0 - u * u).sqrt();
    let dir = [s * v.cos(), s * v.sin(), u];
    let offset: [isize; 3] = std::array::from_fn(|a| (shift * dir[a]).round() as isize);
    if offset != [0; 3] {
        grid.data = shifted(&grid, offset);
    }

    if rng.random_bool(severity) {
        let labels = [LABEL_NECROSIS, LABEL_ENHANCING, LABEL_EDEMA];
        let a = labels[rng.random_range(0..3)];
        let b = labels[rng.random_range(0..3)];
        for v in grid.data.iter_mut() {
            *v = if *v == a {
                b
            } else if *v == b {
                a
            } else {
                *v
            };
        }
    }

    let fg: Vec<[usize; 3]> = (0..grid.data.len())
        .filter(|i| grid.data[*i] != 0)
        .map(|i| grid.coords(i))
        .collect();
    if !fg.is_empty() {
        let com: [f64; 3] =
            std::array::from_fn(|a| fg.iter().map(|c| c[a] as f64).sum::<f64>() / fg.len() as f64);
        let dropped: [bool; 8] = std::array::from_fn(|_| rng.random_bool(0.5 * severity));
        for i in 0..grid.data.len() {
            let c = grid.coords(i);
            let octant = (0..3).fold(0, |acc, a| acc | (((c[a] as f64) >= com[a]) as usize) << a);
            if dropped[octant] {
                grid.data[i] = 0;
            }
        }
    }
    Ok(TissueSeg::new(grid)?)
}

/// Proxy star rating `1 + 5 * DSC` of the whole-tumor masks.
pub fn proxy_rating(gt: &TissueSeg, candidate: &TissueSeg) -> Result<f64> {
    if gt.shape() != candidate.shape() {
        return Err(MetricsError::ShapeMismatch(gt.shape(), candidate.shape()).into());
    }
    Ok(1.0 + 5.0 * metrics::dice(&gt.whole_tumor(), &candidate.whole_tumor())?)
}

/// Integer ratings from `raters` pseudo-raters whose mean approximates `stars`
/// within `1 / (2 * raters)`, repeated for every view.
pub fn proxy_records(
    exam_id: &str,
    seg_id: &str,
    stars: f64,
    raters: usize,
) -> Result<Vec<RatingRecord>> {
    let raters = raters.max(1);
    let mut out = Vec::with_capacity(raters * Axis::ALL.len());
    for view in Axis::ALL {
        for k in 0..raters {
            let dither = (k as f64 + 0.5) / raters as f64;
            let s = (stars + dither).floor().clamp(1.0, 6.0) as i64;
            out.push(RatingRecord::new(
                exam_id,
                seg_id,
                view,
                format!("proxy{k}"),
                s,
            )?);
        }
    }
    Ok(out)
}

/// Writes the four modalities and ground truth in the exam directory layout.
pub fn export_exam(exam: &Exam, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| VolumeError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let paths = ModalityPaths::in_dir(dir);
    for (path, vol) in paths.as_array().into_iter().zip(exam.modalities()) {
        nifti::write_volume(path, vol)?;
    }
    nifti::write_seg(&dir.join("gt.nii.gz"), &exam.seg)?;
    Ok(())
}

/// One degraded candidate segmentation with its proxy rating.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCandidate {
    pub exam_id: String,
    pub seg_id: String,
    pub severity: f64,
    pub seg: TissueSeg,
    pub stars: f64,
}

/// Phantom exams (with ground-truth segmentations) and their candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub exams: Vec<Exam>,
    pub candidates: Vec<SynthCandidate>,
}

impl SynthDataset {
    pub fn exam(&self, exam_id: &str) -> Option<&Exam> {
        self.exams.iter().find(|e| e.exam_id == exam_id)
    }

    /// The exam carrying the candidate's segmentation.
    pub fn candidate_exam(&self, candidate: &SynthCandidate) -> Result<Exam> {
        let exam = self.exam(&candidate.exam_id).ok_or_else(|| {
            SynthError::InvalidParams(format!("unknown exam {}", candidate.exam_id))
        })?;
        Ok(exam.with_seg(candidate.seg.clone())?)
    }
}

fn mix(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.random()
}

/// Generates `n_exams` phantoms, each with `per_exam` candidates whose
/// severities are stratified over [0, 1]: candidate `k` draws from
/// `[k / per_exam, (k + 1) / per_exam)`.
pub fn generate_dataset(
    n_exams: usize,
    per_exam: usize,
    params: &PhantomParams,
    seed: u64,
) -> Result<SynthDataset> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exams = Vec::with_capacity(n_exams);
    let mut candidates = Vec::with_capacity(n_exams * per_exam);
    for i in 0..n_exams {
        let mut exam = generate_phantom(&PhantomParams {
            seed: mix(seed, i as u64),
            ..params.clone()
        })?;
        exam.exam_id = format!("exam{i:03}");
        for k in 0..per_exam {
            let severity = (k as f64 + rng.random::<f64>()) / per_exam as f64;
            let seg = degrade_segmentation(&exam.seg, severity, rng.random())?;
            let stars = proxy_rating(&exam.seg, &seg)?;
            candidates.push(SynthCandidate {
                exam_id: exam.exam_id.clone(),
                seg_id: format!("seg{k}"),
                severity,
                seg,
                stars,
            });
        }
        exams.push(exam);
    }
    Ok(SynthDataset { exams, candidates })
}

/// Writes the dataset as `<dir>/<exam_id>/{t1,t1c,t2,flair,gt}.nii.gz` plus
/// `seg_<seg_id>.nii.gz` per candidate, and `<dir>/ratings.csv` from
/// `raters` pseudo-raters per view.
pub fn export_dataset(dataset: &SynthDataset, dir: &Path, raters: usize) -> Result<()> {
    let mut records = Vec::new();
    for exam in &dataset.exams {
        export_exam(exam, &dir.join(&exam.exam_id))?;
    }
    for c in &dataset.candidates {
        nifti::write_seg(
            &dir.join(&c.exam_id)
                .join(format!("seg_{}.nii.gz", c.seg_id)),
            &c.seg,
        )?;
        records.extend(proxy_records(&c.exam_id, &c.seg_id, c.stars, raters)?);
    }
    let path = dir.join("ratings.csv");
    crate::ratings::write_csv(&path, &records)
        .map_err(|source| VolumeError::Io { path, source })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::center_of_mass;
    use proptest::prelude::*;

    fn small(seed: u64) -> PhantomParams {
        PhantomParams {
            shape: [24, 24, 24],
            ..PhantomParams::with_seed(seed)
        }
    }

    #[test]
    fn phantom_is_deterministic() {
        let a = generate_phantom(&small(3)).unwrap();
        assert_eq!(a, generate_phantom(&small(3)).unwrap());
        assert_ne!(a.t1, generate_phantom(&small(4)).unwrap().t1);
    }

    #[test]
    fn degenerate_radius_bounds_the_tumor() {
        let params = PhantomParams {
            radius_range: [5.0, 5.0],
            ..small(11)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let (tissue, center) = tissue_map(&params, &mut rng);
        let bound = params.max_extent(5.0);
        let g = Grid3::new(params.shape, params.spacing, tissue).unwrap();
        for i in 0..g.data.len() {
            if g.data[i] >= 2 {
                let c = g.coords(i);
                let d = (0..3)
                    .map(|a| (c[a] as f64 - center[a]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(d <= bound + 1e-9, "voxel at {d} beyond {bound}");
            }
        }
    }

    #[test]
    fn invalid_params_rejected() {
        let p = PhantomParams {
            core_fraction: 0.8,
            rim_fraction: 0.5,
            ..small(0)
        };
        assert!(matches!(
            generate_phantom(&p),
            Err(SynthError::InvalidParams(_))
        ));
        let p = PhantomParams {
            radius_range: [5.0, 2.0],
            ..small(0)
        };
        assert!(generate_phantom(&p).is_err());
    }

    #[test]
    fn severity_zero_is_identity_and_range_checked() {
        let exam = generate_phantom(&small(1)).unwrap();
        assert_eq!(degrade_segmentation(&exam.seg, 0.0, 9).unwrap(), exam.seg);
        assert!(matches!(
            degrade_segmentation(&exam.seg, 1.5, 9),
            Err(SynthError::InvalidSeverity(_))
        ));
    }

    #[test]
    fn proxy_rating_examples() {
        let exam = generate_phantom(&small(2)).unwrap();
        assert_eq!(proxy_rating(&exam.seg, &exam.seg).unwrap(), 6.0);
        let empty = TissueSeg::empty(exam.shape(), exam.seg.spacing()).unwrap();
        assert_eq!(proxy_rating(&exam.seg, &empty).unwrap(), 1.0);
        // two 1-voxel-thick slabs of 4 voxels overlapping in 2 -> DSC 0.5
        let mut a = Grid3::filled([4, 4, 1], [1.0; 3], 0u8).unwrap();
        let mut b = a.clone();
        a.data[..4].fill(LABEL_EDEMA);
        b.data[2..6].fill(LABEL_EDEMA);
        let (a, b) = (TissueSeg::new(a).unwrap(), TissueSeg::new(b).unwrap());
        assert_eq!(proxy_rating(&a, &b).unwrap(), 3.5);
        let other = TissueSeg::empty([4, 4, 2], [1.0; 3]).unwrap();
        assert!(matches!(
            proxy_rating(&a, &other),
            Err(SynthError::Metrics(_))
        ));
    }

    #[test]
    fn proxy_records_average_close_to_stars() {
        for stars in [1.0, 2.37, 4.5, 5.99, 6.0] {
            let recs = proxy_records("e", "s", stars, 10).unwrap();
            assert_eq!(recs.len(), 30);
            let mean = recs.iter().map(|r| r.stars as f64).sum::<f64>() / recs.len() as f64;
            assert!((mean - stars).abs() <= 0.05 + 1e-12, "{stars} -> {mean}");
        }
    }

    #[test]
    fn dataset_is_deterministic_and_stratified() {
        let a = generate_dataset(3, 4, &small(0), 5).unwrap();
        assert_eq!(a, generate_dataset(3, 4, &small(0), 5).unwrap());
        assert_eq!((a.exams.len(), a.candidates.len()), (3, 12));
        for (i, c) in a.candidates.iter().enumerate() {
            let k = (i % 4) as f64;
            assert!(c.severity >= k / 4.0 && c.severity < (k + 1.0) / 4.0);
        }
        let dir = tempfile::tempdir().unwrap();
        export_dataset(&a, dir.path(), 3).unwrap();
        assert!(dir.path().join("exam002").join("seg_seg3.nii.gz").exists());
        let ratings = crate::ratings::read_csv(&dir.path().join("ratings.csv")).unwrap();
        assert_eq!(ratings.len(), 12 * 3 * 3);
    }

    #[test]
    fn export_writes_exam_layout() {
        let dir = tempfile::tempdir().unwrap();
        let exam = generate_phantom(&small(5)).unwrap();
        export_exam(&exam, dir.path()).unwrap();
        let loaded = crate::volume::load_exam(
            &exam.exam_id,
            &ModalityPaths::in_dir(dir.path()),
            &dir.path().join("gt.nii.gz"),
        )
        .unwrap();
        assert_eq!(loaded, exam);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn phantom_labels_valid_and_nested(seed in any::<u64>()) {
            let exam = generate_phantom(&small(seed)).unwrap();
            let grid = exam.seg.grid();
            prop_assert!(grid.data.iter().all(|v| [0, 1, 2, 4].contains(v)));
            prop_assert!(grid.data.contains(&LABEL_NECROSIS));
            // every necrosis voxel is enclosed by enhancing tissue, which is enclosed by edema
            for i in 0..grid.data.len() {
                let v = grid.data[i];
                if v == 0 {
                    continue;
                }
                let c = grid.coords(i);
                for d in OFFSETS6 {
                    let n = neighbour(grid.shape, c, d).map_or(0, |j| grid.data[j]);
                    let allowed: &[u8] = match v {
                        LABEL_NECROSIS => &[LABEL_NECROSIS, LABEL_ENHANCING],
                        LABEL_ENHANCING => &[LABEL_NECROSIS, LABEL_ENHANCING, LABEL_EDEMA],
                        _ => &[LABEL_ENHANCING, LABEL_EDEMA, 0],
                    };
                    prop_assert!(allowed.contains(&n), "label {v} touches {n}");
                }
            }
            prop_assert!(center_of_mass(&exam.seg.whole_tumor()).is_ok());
        }
    }
}
