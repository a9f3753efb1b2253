//! Co-registered multi-modal exams and their 2D center-of-mass views.

pub mod nifti;
mod slice;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use slice::{
    bilinear_resize, center_of_mass, encode_labels, extract_com_slices, normalize_channel,
    percentile, round_half_down, Encoding, Normalization, SliceStack, MR_CHANNELS,
};

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid NIfTI data: {reason}")]
    InvalidFormat { path: PathBuf, reason: String },
    #[error("shape mismatch: {what} has {found:?}, expected {expected:?}")]
    ShapeMismatch {
        what: String,
        expected: [usize; 3],
        found: [usize; 3],
    },
    #[error("spacing mismatch: {what} has {found:?}, expected {expected:?}")]
    SpacingMismatch {
        what: String,
        expected: [f64; 3],
        found: [f64; 3],
    },
    #[error("invalid tissue label {value} (allowed: 0, 1, 2, 4)")]
    InvalidLabelValue { value: f64 },
    #[error("non-finite intensity in {0}")]
    NonFiniteIntensity(String),
    #[error("mask has no foreground voxels")]
    EmptyMask,
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// Regular 3D grid stored with the first index varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<T> {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub data: Vec<T>,
}

impl<T: Copy> Grid3<T> {
    pub fn new(shape: [usize; 3], spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(VolumeError::InvalidGrid(format!(
                "zero extent in {shape:?}"
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::InvalidGrid(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(VolumeError::InvalidGrid(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            spacing,
            data,
        })
    }

    pub fn filled(shape: [usize; 3], spacing: [f64; 3], value: T) -> Result<Self> {
        Self::new(shape, spacing, vec![value; shape.iter().product()])
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.shape[0];
        let yz = i / self.shape[0];
        [x, yz % self.shape[1], yz / self.shape[1]]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid3<U> {
        Grid3 {
            shape: self.shape,
            spacing: self.spacing,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }
}

/// MR intensity volume (arbitrary units).
pub type Volume3D = Grid3<f32>;
/// Binary voxel mask.
pub type Mask3D = Grid3<bool>;

/// Tissue codes of the BraTS convention.
pub const LABEL_NECROSIS: u8 = 1;
pub const LABEL_EDEMA: u8 = 2;
pub const LABEL_ENHANCING: u8 = 4;

pub fn is_valid_label(v: u8) -> bool {
    matches!(v, 0 | LABEL_NECROSIS | LABEL_EDEMA | LABEL_ENHANCING)
}

/// Integer tissue segmentation restricted to labels {0, 1, 2, 4}.
#[derive(Clone, Debug, PartialEq)]
pub struct TissueSeg(Grid3<u8>);

impl TissueSeg {
    pub fn new(grid: Grid3<u8>) -> Result<Self> {
        if let Some(bad) = grid.data.iter().find(|v| !is_valid_label(**v)) {
            return Err(VolumeError::InvalidLabelValue { value: *bad as f64 });
        }
        Ok(Self(grid))
    }

    pub fn empty(shape: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        Ok(Self(Grid3::filled(shape, spacing, 0u8)?))
    }

    pub fn grid(&self) -> &Grid3<u8> {
        &self.0
    }

    pub fn shape(&self) -> [usize; 3] {
        self.0.shape
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.0.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.0.data
    }

    /// Whole-tumor mask (any nonzero label).
    pub fn whole_tumor(&self) -> Mask3D {
        self.0.map(|v| v > 0)
    }

    pub fn into_grid(self) -> Grid3<u8> {
        self.0
    }
}

/// Anatomical viewing axis of a 2D slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Axial,
    Coronal,
    Sagittal,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::Axial, Axis::Coronal, Axis::Sagittal];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Axial => "axial",
            Axis::Coronal => "coronal",
            Axis::Sagittal => "sagittal",
        }
    }
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Axis {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "axial" => Ok(Axis::Axial),
            "coronal" => Ok(Axis::Coronal),
            "sagittal" => Ok(Axis::Sagittal),
            other => Err(format!("unknown view '{other}'")),
        }
    }
}

/// Which voxel index runs along each anatomical direction.
///
/// `axial` is the voxel axis perpendicular to axial planes (inferior-superior),
/// and likewise for the other two.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AxisMap {
    pub sagittal: usize,
    pub coronal: usize,
    pub axial: usize,
}

impl Default for AxisMap {
    fn default() -> Self {
        Self {
            sagittal: 0,
            coronal: 1,
            axial: 2,
        }
    }
}

impl AxisMap {
    pub fn voxel_axis(&self, axis: Axis) -> usize {
        match axis {
            Axis::Axial => self.axial,
            Axis::Coronal => self.coronal,
            Axis::Sagittal => self.sagittal,
        }
    }

    /// Derives the mapping from a voxel-to-world matrix (rows = world x, y, z).
    /// Falls back to the default when the dominant directions are ambiguous.
    pub fn from_affine(m: [[f64; 3]; 3]) -> Self {
        let mut world_of_voxel = [0usize; 3];
        for (j, slot) in world_of_voxel.iter_mut().enumerate() {
            let col = [m[0][j].abs(), m[1][j].abs(), m[2][j].abs()];
            *slot = (0..3)
                .max_by(|a, b| col[*a].total_cmp(&col[*b]))
                .unwrap_or(j);
        }
        let mut seen = [false; 3];
        for w in world_of_voxel {
            seen[w] = true;
        }
        if seen.iter().any(|s| !s) {
            return Self::default();
        }
        let find = |world: usize| {
            world_of_voxel
                .iter()
                .position(|w| *w == world)
                .unwrap_or(world)
        };
        Self {
            sagittal: find(0),
            coronal: find(1),
            axial: find(2),
        }
    }
}

/// One subject: four co-registered MR modalities plus a tissue segmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Exam {
    pub exam_id: String,
    pub t1: Volume3D,
    pub t1c: Volume3D,
    pub t2: Volume3D,
    pub flair: Volume3D,
    pub seg: TissueSeg,
    pub axes: AxisMap,
}

impl Exam {
    /// Validates co-registration: identical shape and spacing across all grids.
    pub fn new(
        exam_id: impl Into<String>,
        modalities: [Volume3D; 4],
        seg: TissueSeg,
        axes: AxisMap,
    ) -> Result<Self> {
        let [t1, t1c, t2, flair] = modalities;
        let shape = t1.shape;
        let spacing = t1.spacing;
        for (name, vol) in [("t1c", &t1c), ("t2", &t2), ("flair", &flair)] {
            check_alignment(name, shape, spacing, vol.shape, vol.spacing)?;
        }
        check_alignment("seg", shape, spacing, seg.shape(), seg.spacing())?;
        for (name, vol) in [("t1", &t1), ("t1c", &t1c), ("t2", &t2), ("flair", &flair)] {
            if vol.data.iter().any(|v| !v.is_finite()) {
                return Err(VolumeError::NonFiniteIntensity(name.to_string()));
            }
        }
        Ok(Self {
            exam_id: exam_id.into(),
            t1,
            t1c,
            t2,
            flair,
            seg,
            axes,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.t1.shape
    }

    pub fn modalities(&self) -> [&Volume3D; 4] {
        [&self.t1, &self.t1c, &self.t2, &self.flair]
    }

    /// Same anatomy with a different candidate segmentation.
    pub fn with_seg(&self, seg: TissueSeg) -> Result<Self> {
        check_alignment(
            "seg",
            self.shape(),
            self.t1.spacing,
            seg.shape(),
            seg.spacing(),
        )?;
        Ok(Self {
            seg,
            ..self.clone()
        })
    }
}

fn check_alignment(
    what: &str,
    shape: [usize; 3],
    spacing: [f64; 3],
    found_shape: [usize; 3],
    found_spacing: [f64; 3],
) -> Result<()> {
    if found_shape != shape {
        return Err(VolumeError::ShapeMismatch {
            what: what.to_string(),
            expected: shape,
            found: found_shape,
        });
    }
    let close = spacing
        .iter()
        .zip(&found_spacing)
        .all(|(a, b)| (a - b).abs() <= 1e-4 * a.abs().max(1.0));
    if !close {
        return Err(VolumeError::SpacingMismatch {
            what: what.to_string(),
            expected: spacing,
            found: found_spacing,
        });
    }
    Ok(())
}

/// Paths of the four modalities, in T1, T1c, T2, FLAIR order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModalityPaths {
    pub t1: PathBuf,
    pub t1c: PathBuf,
    pub t2: PathBuf,
    pub flair: PathBuf,
}

impl ModalityPaths {
    /// Conventional file names inside an exam directory.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            t1: dir.join("t1.nii.gz"),
            t1c: dir.join("t1c.nii.gz"),
            t2: dir.join("t2.nii.gz"),
            flair: dir.join("flair.nii.gz"),
        }
    }

    pub fn as_array(&self) -> [&Path; 4] {
        [&self.t1, &self.t1c, &self.t2, &self.flair]
    }
}

/// Loads and validates an exam from four modality files and a segmentation file.
pub fn load_exam(exam_id: &str, modalities: &ModalityPaths, seg_path: &Path) -> Result<Exam> {
    let mut vols = Vec::with_capacity(4);
    let mut axes = AxisMap::default();
    for (i, path) in modalities.as_array().into_iter().enumerate() {
        let image = nifti::read(path)?;
        if i == 0 {
            axes = image.axes;
        }
        if image.data.iter().any(|v| !v.is_finite()) {
            return Err(VolumeError::NonFiniteIntensity(path.display().to_string()));
        }
        vols.push(image.into_volume()?);
    }
    let seg = nifti::read(seg_path)?.into_seg()?;
    let modalities: [Volume3D; 4] = vols.try_into().expect("four modalities");
    Exam::new(exam_id, modalities, seg, axes)
}
