use serde::{Deserialize, Serialize};

use super::{
    Axis, Exam, Grid3, Mask3D, Result, VolumeError, LABEL_EDEMA, LABEL_ENHANCING, LABEL_NECROSIS,
};

/// Number of MR channels (T1, T1c, T2, FLAIR) leading every stack.
pub const MR_CHANNELS: usize = 4;

/// How the tissue segmentation is presented to the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    /// One ordinal channel with codes {0, 1, 2, 3}.
    Single,
    /// Three nested binary channels: enhancing tumor, tumor core, whole tumor.
    Brats,
}

impl Encoding {
    pub const ALL: [Encoding; 2] = [Encoding::Single, Encoding::Brats];

    pub fn label_channels(self) -> usize {
        match self {
            Encoding::Single => 1,
            Encoding::Brats => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Encoding::Single => "single",
            Encoding::Brats => "brats",
        }
    }
}

impl std::fmt::Display for Encoding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-slice, per-channel intensity normalization of the MR channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    Minmax,
    /// Clip to the 0.5th/99.5th percentiles, then rescale to [0, 1].
    Percentile,
}

impl Normalization {
    pub const ALL: [Normalization; 2] = [Normalization::Minmax, Normalization::Percentile];

    pub fn name(self) -> &'static str {
        match self {
            Normalization::Minmax => "minmax",
            Normalization::Percentile => "percentile",
        }
    }
}

impl std::fmt::Display for Normalization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A 2D multi-channel network input: 4 MR channels followed by the label channels.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub height: usize,
    pub width: usize,
    pub label_channels: usize,
    /// Channel-major `(4 + label_channels) x height x width`.
    pub data: Vec<f32>,
    pub axis: Axis,
    pub slice_index: usize,
    pub encoding: Encoding,
    pub normalization: Normalization,
}

impl SliceStack {
    pub fn channels(&self) -> usize {
        MR_CHANNELS + self.label_channels
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    pub fn mr_data(&self) -> &[f32] {
        &self.data[..MR_CHANNELS * self.plane()]
    }

    pub fn mr_data_mut(&mut self) -> &mut [f32] {
        let end = MR_CHANNELS * self.plane();
        &mut self.data[..end]
    }

    pub fn label_data(&self) -> &[f32] {
        &self.data[MR_CHANNELS * self.plane()..]
    }

    /// Resamples to `height x width`: bilinear (half-pixel centres) for MR
    /// channels, nearest neighbour for label channels.
    pub fn resized(&self, height: usize, width: usize) -> SliceStack {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let mut data = Vec::with_capacity(self.channels() * height * width);
        for c in 0..self.channels() {
            let src = self.channel(c);
            if c < MR_CHANNELS {
                data.extend(bilinear_resize(src, self.height, self.width, height, width));
            } else {
                let sy = self.height as f64 / height as f64;
                let sx = self.width as f64 / width as f64;
                for y in 0..height {
                    let yy = ((y as f64 * sy).floor() as usize).min(self.height - 1);
                    for x in 0..width {
                        let xx = ((x as f64 * sx).floor() as usize).min(self.width - 1);
                        data.push(src[yy * self.width + xx]);
                    }
                }
            }
        }
        SliceStack {
            height,
            width,
            data,
            ..self.clone()
        }
    }
}

/// Bilinear resampling of one `height x width` plane with half-pixel centres
/// and edge clamping.
pub fn bilinear_resize(
    src: &[f32],
    height: usize,
    width: usize,
    new_height: usize,
    new_width: usize,
) -> Vec<f32> {
    if (height, width) == (new_height, new_width) {
        return src.to_vec();
    }
    let sy = height as f64 / new_height as f64;
    let sx = width as f64 / new_width as f64;
    let mut out = Vec::with_capacity(new_height * new_width);
    for y in 0..new_height {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (height - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let ty = fy - y0 as f64;
        for x in 0..new_width {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (width - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let tx = fx - x0 as f64;
            let at = |yy: usize, xx: usize| src[yy * width + xx] as f64;
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
            let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
            out.push((top * (1.0 - ty) + bottom * ty) as f32);
        }
    }
    out
}

/// Unweighted mean of the foreground voxel indices along each grid axis.
pub fn center_of_mass(mask: &Mask3D) -> Result<[f64; 3]> {
    let mut sums = [0.0f64; 3];
    let mut count = 0u64;
    for (i, &on) in mask.data.iter().enumerate() {
        if on {
            let c = mask.coords(i);
            for a in 0..3 {
                sums[a] += c[a] as f64;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(VolumeError::EmptyMask);
    }
    Ok(sums.map(|s| s / count as f64))
}

/// Rounds to the nearest integer, sending exact halves down.
pub fn round_half_down(x: f64) -> i64 {
    (x - 0.5).ceil() as i64
}

/// Linearly interpolated percentile (`q` in [0, 100]) of ascending `sorted` values.
pub fn percentile(sorted: &[f32], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let pos = q.clamp(0.0, 100.0) / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] as f64 + (sorted[hi] as f64 - sorted[lo] as f64) * t
}

/// Maps a finite channel into [0, 1]; constant channels become all zeros.
pub fn normalize_channel(channel: &[f32], method: Normalization) -> Vec<f32> {
    if channel.is_empty() {
        return Vec::new();
    }
    let (lo, hi) = match method {
        Normalization::Minmax => channel
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(*v as f64), hi.max(*v as f64))
            }),
        Normalization::Percentile => {
            let mut sorted = channel.to_vec();
            sorted.sort_by(f32::total_cmp);
            (percentile(&sorted, 0.5), percentile(&sorted, 99.5))
        }
    };
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; channel.len()];
    }
    channel
        .iter()
        .map(|v| (((*v as f64).clamp(lo, hi) - lo) / range) as f32)
        .collect()
}

/// Encodes a 2D label slice into network label channels.
pub fn encode_labels(seg_slice: &[u8], mode: Encoding) -> Result<Vec<Vec<f32>>> {
    if let Some(bad) = seg_slice.iter().find(|v| !super::is_valid_label(**v)) {
        return Err(VolumeError::InvalidLabelValue { value: *bad as f64 });
    }
    Ok(match mode {
        Encoding::Single => vec![seg_slice
            .iter()
            .map(|v| match *v {
                LABEL_NECROSIS => 1.0,
                LABEL_EDEMA => 2.0,
                LABEL_ENHANCING => 3.0,
                _ => 0.0,
            })
            .collect()],
        Encoding::Brats => {
            let bin = |pred: fn(u8) -> bool| -> Vec<f32> {
                seg_slice
                    .iter()
                    .map(|v| if pred(*v) { 1.0 } else { 0.0 })
                    .collect()
            };
            vec![
                bin(|v| v == LABEL_ENHANCING),
                bin(|v| v == LABEL_ENHANCING || v == LABEL_NECROSIS),
                bin(|v| v > 0),
            ]
        }
    })
}

/// Extracts the plane `index` perpendicular to voxel axis `axis`.
///
/// The in-plane axes keep their grid order; the lower one runs along the width.
fn plane_of<T: Copy>(grid: &Grid3<T>, axis: usize, index: usize) -> (usize, usize, Vec<T>) {
    let others: Vec<usize> = (0..3).filter(|a| *a != axis).collect();
    let (wa, ha) = (others[0], others[1]);
    let (width, height) = (grid.shape[wa], grid.shape[ha]);
    let mut out = Vec::with_capacity(width * height);
    let mut c = [0usize; 3];
    c[axis] = index;
    for r in 0..height {
        c[ha] = r;
        for col in 0..width {
            c[wa] = col;
            out.push(grid.get(c[0], c[1], c[2]));
        }
    }
    (height, width, out)
}

/// Builds the network input at the whole-tumor center-of-mass plane along `axis`.
///
/// Empty segmentations fall back to the central plane.
pub fn extract_com_slices(
    exam: &Exam,
    axis: Axis,
    encoding: Encoding,
    normalization: Normalization,
) -> SliceStack {
    let voxel_axis = exam.axes.voxel_axis(axis);
    let extent = exam.shape()[voxel_axis];
    let slice_index = match center_of_mass(&exam.seg.whole_tumor()) {
        Ok(com) => round_half_down(com[voxel_axis]).clamp(0, extent as i64 - 1) as usize,
        Err(_) => extent / 2,
    };
    let mut data = Vec::new();
    let (mut height, mut width) = (0, 0);
    for vol in exam.modalities() {
        let (h, w, plane) = plane_of(vol, voxel_axis, slice_index);
        (height, width) = (h, w);
        data.extend(normalize_channel(&plane, normalization));
    }
    let (_, _, labels) = plane_of(exam.seg.grid(), voxel_axis, slice_index);
    let encoded = encode_labels(&labels, encoding).expect("segmentation validated at construction");
    for ch in encoded {
        data.extend(ch);
    }
    SliceStack {
        height,
        width,
        label_channels: encoding.label_channels(),
        data,
        axis,
        slice_index,
        encoding,
        normalization,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{AxisMap, TissueSeg};

    fn mask_with(shape: [usize; 3], points: &[[usize; 3]]) -> Mask3D {
        let mut m = Grid3::filled(shape, [1.0; 3], false).unwrap();
        for p in points {
            let i = m.index(p[0], p[1], p[2]);
            m.data[i] = true;
        }
        m
    }

    #[test]
    fn com_single_voxel_and_pair() {
        assert_eq!(
            center_of_mass(&mask_with([8, 8, 8], &[[3, 4, 5]])).unwrap(),
            [3.0, 4.0, 5.0]
        );
        assert_eq!(
            center_of_mass(&mask_with([8, 8, 8], &[[0, 0, 0], [2, 0, 0]])).unwrap(),
            [1.0, 0.0, 0.0]
        );
        assert!(matches!(
            center_of_mass(&mask_with([4, 4, 4], &[])),
            Err(VolumeError::EmptyMask)
        ));
    }

    #[test]
    fn half_rounds_down() {
        assert_eq!(round_half_down(2.5), 2);
        assert_eq!(round_half_down(2.51), 3);
        assert_eq!(round_half_down(2.49), 2);
        assert_eq!(round_half_down(3.0), 3);
        assert_eq!(round_half_down(0.5), 0);
    }

    #[test]
    fn fig1_truth_table() {
        let ch = encode_labels(&[4, 1, 2, 0], Encoding::Brats).unwrap();
        assert_eq!(ch[0], vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(ch[1], vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(ch[2], vec![1.0, 1.0, 1.0, 0.0]);
        let single = encode_labels(&[0, 1, 2, 4], Encoding::Single).unwrap();
        assert_eq!(single, vec![vec![0.0, 1.0, 2.0, 3.0]]);
        assert!(encode_labels(&[3], Encoding::Single).is_err());
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(
            normalize_channel(&[2.5; 9], Normalization::Minmax),
            vec![0.0; 9]
        );
        assert_eq!(
            normalize_channel(&[2.5; 9], Normalization::Percentile),
            vec![0.0; 9]
        );
        let ramp: Vec<f32> = (0..=100).map(|v| v as f32).collect();
        let out = normalize_channel(&ramp, Normalization::Minmax);
        for (v, o) in ramp.iter().zip(&out) {
            assert!((*o as f64 - *v as f64 / 100.0).abs() < 1e-7);
        }
    }

    #[test]
    fn percentile_normalization_against_sort_oracle() {
        // values 0..=1000 shuffled deterministically
        let values: Vec<f32> = (0..=1000).map(|i| ((i * 389) % 1001) as f32).collect();
        let out = normalize_channel(&values, Normalization::Percentile);
        // numpy-style linear percentile of 0..=1000: p0.5 -> 5.0, p99.5 -> 995.0
        let mut sorted = values.clone();
        sorted.sort_by(f32::total_cmp);
        let lo = percentile(&sorted, 0.5);
        let hi = percentile(&sorted, 99.5);
        assert_eq!((lo, hi), (5.0, 995.0));
        for (v, o) in values.iter().zip(&out) {
            let expected = ((*v as f64).clamp(5.0, 995.0) - 5.0) / 990.0;
            assert!((*o as f64 - expected).abs() < 1e-7);
        }
    }

    fn planar_exam() -> Exam {
        let shape = [16, 16, 16];
        let mut seg = Grid3::filled(shape, [1.0; 3], 0u8).unwrap();
        // tumor occupies plane z = 7, x in 2..6, y in 9..12
        for x in 2..6 {
            for y in 9..12 {
                let i = seg.index(x, y, 7);
                seg.data[i] = if x == 2 { 4 } else { 2 };
            }
        }
        let vol = |k: f32| {
            let mut g = Grid3::filled(shape, [1.0; 3], 0.0f32).unwrap();
            for (i, v) in g.data.iter_mut().enumerate() {
                *v = ((i * 7919) % 97) as f32 * k;
            }
            g
        };
        Exam::new(
            "planar",
            [vol(1.0), vol(2.0), vol(0.5), vol(3.0)],
            TissueSeg::new(seg).unwrap(),
            AxisMap::default(),
        )
        .unwrap()
    }

    #[test]
    fn planar_tumor_slice_indices() {
        let exam = planar_exam();
        let axial = extract_com_slices(&exam, Axis::Axial, Encoding::Brats, Normalization::Minmax);
        assert_eq!(axial.slice_index, 7);
        assert_eq!((axial.height, axial.width), (16, 16));
        assert_eq!(axial.channels(), 7);
        // brute-force COM: x mean of 2..6 = 3.5 -> 3 (half down), y mean of 9..12 = 10
        let sag = extract_com_slices(
            &exam,
            Axis::Sagittal,
            Encoding::Single,
            Normalization::Minmax,
        );
        assert_eq!(sag.slice_index, 3);
        let cor = extract_com_slices(
            &exam,
            Axis::Coronal,
            Encoding::Single,
            Normalization::Minmax,
        );
        assert_eq!(cor.slice_index, 10);
        assert_eq!(cor.channels(), 5);
    }

    #[test]
    fn empty_seg_uses_central_plane() {
        let exam = planar_exam();
        let empty = exam
            .with_seg(TissueSeg::empty([16, 16, 16], [1.0; 3]).unwrap())
            .unwrap();
        for axis in Axis::ALL {
            let s = extract_com_slices(&empty, axis, Encoding::Brats, Normalization::Percentile);
            assert_eq!(s.slice_index, 8);
            assert!(s.label_data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn labels_are_not_normalized() {
        let exam = planar_exam();
        let s = extract_com_slices(&exam, Axis::Axial, Encoding::Single, Normalization::Minmax);
        let max_label = s.label_data().iter().cloned().fold(0.0f32, f32::max);
        assert_eq!(max_label, 3.0);
        assert!(s.mr_data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn resize_identity_and_nearest_labels() {
        let exam = planar_exam();
        let s = extract_com_slices(&exam, Axis::Axial, Encoding::Brats, Normalization::Minmax);
        assert_eq!(s.resized(16, 16), s);
        let r = s.resized(32, 32);
        assert_eq!((r.height, r.width), (32, 32));
        assert!(r.label_data().iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!(r.mr_data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
