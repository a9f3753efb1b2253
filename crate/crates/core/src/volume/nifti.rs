//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Reads 3D scalar volumes of the common integer and floating datatypes in
//! either byte order, applies `scl_slope`/`scl_inter`, and derives the
//! anatomical axis labelling from the sform (preferred) or qform.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{AxisMap, Grid3, Result, TissueSeg, Volume3D, VolumeError};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

/// Decoded 3D image with its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub axes: AxisMap,
    pub data: Vec<f32>,
}

impl NiftiImage {
    pub fn into_volume(self) -> Result<Volume3D> {
        Grid3::new(self.shape, self.spacing, self.data)
    }

    /// Interprets voxel values as tissue labels; non-integral or unknown codes are rejected.
    pub fn into_seg(self) -> Result<TissueSeg> {
        let mut labels = Vec::with_capacity(self.data.len());
        for v in &self.data {
            let ok = v.fract() == 0.0 && matches!(*v as i64, 0 | 1 | 2 | 4);
            if !ok {
                return Err(VolumeError::InvalidLabelValue { value: *v as f64 });
            }
            labels.push(*v as u8);
        }
        TissueSeg::new(Grid3::new(self.shape, self.spacing, labels)?)
    }
}

fn invalid(path: &Path, reason: impl Into<String>) -> VolumeError {
    VolumeError::InvalidFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn io_err(path: &Path, source: std::io::Error) -> VolumeError {
    if source.kind() == std::io::ErrorKind::NotFound {
        VolumeError::FileNotFound(path.to_path_buf())
    } else {
        VolumeError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

struct Fields<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Fields<'_> {
    fn i16(&self, off: usize) -> i16 {
        let b = [self.bytes[off], self.bytes[off + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn i32(&self, off: usize) -> i32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().expect("4 bytes");
        if self.big_endian {
            i32::from_be_bytes(b)
        } else {
            i32::from_le_bytes(b)
        }
    }

    fn f32(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().expect("4 bytes");
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }

    fn f64_at(&self, off: usize) -> f64 {
        let b: [u8; 8] = self.bytes[off..off + 8].try_into().expect("8 bytes");
        if self.big_endian {
            f64::from_be_bytes(b)
        } else {
            f64::from_le_bytes(b)
        }
    }
}

/// Reads a `.nii` or gzip-compressed `.nii.gz` file.
pub fn read(path: &Path) -> Result<NiftiImage> {
    let raw = fs::read(path).map_err(|e| io_err(path, e))?;
    let bytes = if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| invalid(path, format!("gzip: {e}")))?;
        out
    } else {
        raw
    };
    decode(path, &bytes)
}

fn decode(path: &Path, bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(invalid(path, "truncated header"));
    }
    let big_endian = match (
        i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")),
        i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes")),
    ) {
        (348, _) => false,
        (_, 348) => true,
        _ => return Err(invalid(path, "sizeof_hdr is not 348")),
    };
    let f = Fields { bytes, big_endian };
    if &bytes[344..347] != b"n+1" && &bytes[344..347] != b"ni1" {
        return Err(invalid(path, "missing NIfTI-1 magic"));
    }
    let ndim = f.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(invalid(path, format!("dim[0] = {ndim}")));
    }
    let mut shape = [1usize; 3];
    for (i, s) in shape.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let d = f.i16(42 + 2 * i);
        if d < 1 {
            return Err(invalid(path, format!("dim[{}] = {d}", i + 1)));
        }
        *s = d as usize;
    }
    for i in 3..ndim as usize {
        if f.i16(42 + 2 * i) > 1 {
            return Err(invalid(path, "only 3D volumes are supported"));
        }
    }
    let mut spacing = [1.0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = f.f32(80 + 4 * i).abs() as f64;
        if i < ndim as usize {
            if !(p.is_finite() && p > 0.0) {
                return Err(invalid(path, format!("pixdim[{}] = {p}", i + 1)));
            }
            *s = p;
        }
    }
    let datatype = f.i16(70);
    let vox_offset = f.f32(108);
    if !(vox_offset.is_finite() && vox_offset >= HEADER_SIZE as f32) {
        return Err(invalid(path, format!("vox_offset = {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let count: usize = shape.iter().product();
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(invalid(path, format!("unsupported datatype {other}"))),
    };
    let end = offset + count * width;
    if bytes.len() < end {
        return Err(invalid(path, "truncated voxel data"));
    }
    let vf = Fields {
        bytes: &bytes[offset..end],
        big_endian,
    };
    let mut data: Vec<f32> = (0..count)
        .map(|i| match datatype {
            DT_UINT8 => vf.bytes[i] as f32,
            DT_INT8 => vf.bytes[i] as i8 as f32,
            DT_INT16 => vf.i16(2 * i) as f32,
            DT_UINT16 => vf.i16(2 * i) as u16 as f32,
            DT_INT32 => vf.i32(4 * i) as f32,
            DT_UINT32 => vf.i32(4 * i) as u32 as f32,
            DT_FLOAT32 => vf.f32(4 * i),
            _ => vf.f64_at(8 * i) as f32,
        })
        .collect();
    let slope = f.f32(112);
    let inter = f.f32(116);
    if slope.is_finite() && slope != 0.0 && !(slope == 1.0 && inter == 0.0) {
        let inter = if inter.is_finite() { inter } else { 0.0 };
        data.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Ok(NiftiImage {
        shape,
        spacing,
        axes: orientation(&f),
        data,
    })
}

fn orientation(f: &Fields<'_>) -> AxisMap {
    let qform_code = f.i16(252);
    let sform_code = f.i16(254);
    if sform_code > 0 {
        let mut m = [[0.0; 3]; 3];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = f.f32(280 + 16 * r + 4 * c) as f64;
            }
        }
        return AxisMap::from_affine(m);
    }
    if qform_code > 0 {
        let (b, c, d) = (f.f32(256) as f64, f.f32(260) as f64, f.f32(264) as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let m = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - c * c - b * b,
            ],
        ];
        return AxisMap::from_affine(m);
    }
    AxisMap::default()
}

fn encode(shape: [usize; 3], spacing: [f64; 3], datatype: i16, voxels: &[u8]) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    let dims: [i16; 8] = [
        3,
        shape[0] as i16,
        shape[1] as i16,
        shape[2] as i16,
        1,
        1,
        1,
        1,
    ];
    for (i, d) in dims.iter().enumerate() {
        h[40 + 2 * i..42 + 2 * i].copy_from_slice(&d.to_le_bytes());
    }
    let bitpix: i16 = match datatype {
        DT_UINT8 => 8,
        _ => 32,
    };
    h[70..72].copy_from_slice(&datatype.to_le_bytes());
    h[72..74].copy_from_slice(&bitpix.to_le_bytes());
    let pixdim: [f32; 8] = [
        1.0,
        spacing[0] as f32,
        spacing[1] as f32,
        spacing[2] as f32,
        1.0,
        1.0,
        1.0,
        1.0,
    ];
    for (i, p) in pixdim.iter().enumerate() {
        h[76 + 4 * i..80 + 4 * i].copy_from_slice(&p.to_le_bytes());
    }
    h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_le_bytes());
    h[112..116].copy_from_slice(&1.0f32.to_le_bytes());
    // xyzt_units: millimetres
    h[123] = 2;
    // sform: axis-aligned RAS with the voxel spacing on the diagonal
    h[254..256].copy_from_slice(&1i16.to_le_bytes());
    for r in 0..3 {
        for c in 0..4 {
            let v = if r == c { spacing[r] as f32 } else { 0.0 };
            h[280 + 16 * r + 4 * c..284 + 16 * r + 4 * c].copy_from_slice(&v.to_le_bytes());
        }
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.extend_from_slice(voxels);
    h
}

fn write_bytes(path: &Path, payload: &[u8]) -> Result<()> {
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let bytes = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(payload).map_err(|e| io_err(path, e))?;
        enc.finish().map_err(|e| io_err(path, e))?
    } else {
        payload.to_vec()
    };
    crate::io::write_atomic(path, &bytes).map_err(|e| io_err(path, e))
}

/// Writes an intensity volume as float32.
pub fn write_volume(path: &Path, vol: &Volume3D) -> Result<()> {
    let mut voxels = Vec::with_capacity(vol.data.len() * 4);
    for v in &vol.data {
        voxels.extend_from_slice(&v.to_le_bytes());
    }
    write_bytes(path, &encode(vol.shape, vol.spacing, DT_FLOAT32, &voxels))
}

/// Writes a segmentation as uint8 labels.
pub fn write_seg(path: &Path, seg: &TissueSeg) -> Result<()> {
    write_bytes(
        path,
        &encode(seg.shape(), seg.spacing(), DT_UINT8, seg.data()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float_volume_round_trip_gz() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.nii.gz");
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        let vol = Grid3::new([2, 3, 4], [1.0, 1.5, 2.0], data).unwrap();
        write_volume(&path, &vol).unwrap();
        let back = read(&path).unwrap();
        assert_eq!(back.axes, AxisMap::default());
        assert_eq!(back.into_volume().unwrap(), vol);
    }

    #[test]
    fn seg_round_trip_uncompressed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nii");
        let grid = Grid3::new([2, 2, 1], [1.0; 3], vec![0u8, 1, 2, 4]).unwrap();
        let seg = TissueSeg::new(grid).unwrap();
        write_seg(&path, &seg).unwrap();
        assert_eq!(read(&path).unwrap().into_seg().unwrap(), seg);
    }

    #[test]
    fn int16_big_endian_with_scaling() {
        let mut h = encode([2, 1, 1], [1.0; 3], DT_INT16, &[]);
        // rewrite the header big-endian by hand for the fields the reader needs
        h[0..4].copy_from_slice(&348i32.to_be_bytes());
        h[40..42].copy_from_slice(&3i16.to_be_bytes());
        h[42..44].copy_from_slice(&2i16.to_be_bytes());
        h[44..46].copy_from_slice(&1i16.to_be_bytes());
        h[46..48].copy_from_slice(&1i16.to_be_bytes());
        h[70..72].copy_from_slice(&DT_INT16.to_be_bytes());
        for i in 0..3 {
            h[80 + 4 * i..84 + 4 * i].copy_from_slice(&1.0f32.to_be_bytes());
        }
        h[108..112].copy_from_slice(&(VOX_OFFSET as f32).to_be_bytes());
        h[112..116].copy_from_slice(&2.0f32.to_be_bytes());
        h[116..120].copy_from_slice(&1.0f32.to_be_bytes());
        h[254..256].copy_from_slice(&0i16.to_be_bytes());
        h.extend_from_slice(&(-3i16).to_be_bytes());
        h.extend_from_slice(&7i16.to_be_bytes());
        let img = decode(Path::new("mem"), &h).unwrap();
        assert_eq!(img.data, vec![-5.0, 15.0]);
    }

    #[test]
    fn missing_file_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.nii.gz");
        assert!(matches!(read(&missing), Err(VolumeError::FileNotFound(_))));
        let vol = Grid3::new([4, 4, 4], [1.0; 3], vec![1.0f32; 64]).unwrap();
        let path = dir.path().join("t.nii");
        write_volume(&path, &vol).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            read(&path),
            Err(VolumeError::InvalidFormat { .. })
        ));
    }

    #[test]
    fn fractional_label_rejected() {
        let img = NiftiImage {
            shape: [1, 1, 1],
            spacing: [1.0; 3],
            axes: AxisMap::default(),
            data: vec![1.5],
        };
        assert!(matches!(
            img.into_seg(),
            Err(VolumeError::InvalidLabelValue { .. })
        ));
    }
}
