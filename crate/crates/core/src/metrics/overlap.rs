//! Volumetric and surface overlap between binary masks.

use crate::volume::Mask3D;

use super::{MetricsError, Result};

pub const DEFAULT_TOLERANCE_MM: f64 = 1.0;

fn check_same_grid(a: &Mask3D, b: &Mask3D) -> Result<()> {
    if a.shape != b.shape {
        return Err(MetricsError::ShapeMismatch(a.shape, b.shape));
    }
    if a.spacing != b.spacing {
        return Err(MetricsError::SpacingMismatch(a.spacing, b.spacing));
    }
    Ok(())
}

/// Sørensen–Dice coefficient; two empty masks agree perfectly (1.0).
pub fn dice(a: &Mask3D, b: &Mask3D) -> Result<f64> {
    if a.shape != b.shape {
        return Err(MetricsError::ShapeMismatch(a.shape, b.shape));
    }
    let (mut na, mut nb, mut both) = (0u64, 0u64, 0u64);
    for (x, y) in a.data.iter().zip(&b.data) {
        na += *x as u64;
        nb += *y as u64;
        both += (*x && *y) as u64;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Neighbour offsets: 6-connectivity in 3D; 8-connectivity in-plane when one
/// axis has extent 1.
fn neighbour_offsets(shape: [usize; 3]) -> Vec<[isize; 3]> {
    let flat: Vec<usize> = (0..3).filter(|a| shape[*a] == 1).collect();
    if flat.len() == 1 {
        let mut out = Vec::new();
        for d0 in -1..=1isize {
            for d1 in -1..=1isize {
                for d2 in -1..=1isize {
                    let d = [d0, d1, d2];
                    if d == [0, 0, 0] || d[flat[0]] != 0 {
                        continue;
                    }
                    out.push(d);
                }
            }
        }
        return out;
    }
    let mut out = Vec::new();
    for a in 0..3 {
        if shape[a] == 1 {
            continue;
        }
        for s in [-1isize, 1] {
            let mut d = [0isize; 3];
            d[a] = s;
            out.push(d);
        }
    }
    out
}

/// Foreground voxels with at least one background (or out-of-grid) neighbour.
pub fn boundary(mask: &Mask3D) -> Vec<[usize; 3]> {
    let offsets = neighbour_offsets(mask.shape);
    let mut out = Vec::new();
    for (i, &on) in mask.data.iter().enumerate() {
        if !on {
            continue;
        }
        let c = mask.coords(i);
        let on_edge = offsets.iter().any(|d| {
            let mut n = [0usize; 3];
            for a in 0..3 {
                let v = c[a] as isize + d[a];
                if v < 0 || v >= mask.shape[a] as isize {
                    return true;
                }
                n[a] = v as usize;
            }
            !mask.get(n[0], n[1], n[2])
        });
        if on_edge {
            out.push(c);
        }
    }
    out
}

const FAR: f64 = 1e30;

/// 1D squared distance transform of `f` with sample spacing `step`
/// (lower envelope of parabolas).
fn edt_1d(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let w = step * step;
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    let mut seeded = false;
    for q in 0..n {
        if f[q] >= FAR {
            continue;
        }
        if !seeded {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            seeded = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + w * (q * q) as f64) - (f[p] + w * (p * p) as f64))
                / (2.0 * w * (q as f64 - p as f64));
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0: the new parabola dominates everywhere
                v[0] = q;
                z[0] = f64::NEG_INFINITY;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if !seeded {
        out.iter_mut().for_each(|o| *o = FAR);
        return;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = w * d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel to the nearest seed.
fn squared_distance_map(shape: [usize; 3], spacing: [f64; 3], seeds: &[[usize; 3]]) -> Vec<f64> {
    let [nx, ny, nz] = shape;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut d = vec![FAR; nx * ny * nz];
    for s in seeds {
        d[idx(s[0], s[1], s[2])] = 0.0;
    }
    for axis in 0..3 {
        let len = shape[axis];
        let mut line = vec![0.0; len];
        let mut out = vec![0.0; len];
        let (o1, o2) = match axis {
            0 => (ny, nz),
            1 => (nx, nz),
            _ => (nx, ny),
        };
        for a in 0..o1 {
            for b in 0..o2 {
                let at = |t: usize| match axis {
                    0 => idx(t, a, b),
                    1 => idx(a, t, b),
                    _ => idx(a, b, t),
                };
                for (t, l) in line.iter_mut().enumerate() {
                    *l = d[at(t)];
                }
                edt_1d(&line, spacing[axis], &mut out);
                for (t, o) in out.iter().enumerate() {
                    d[at(t)] = o.min(FAR);
                }
            }
        }
    }
    d
}

/// Symmetric surface Dice at `tolerance_mm`: the fraction of boundary voxels of
/// both masks lying within tolerance of the other mask's boundary.
pub fn surface_dice(a: &Mask3D, b: &Mask3D, tolerance_mm: f64) -> Result<f64> {
    check_same_grid(a, b)?;
    if !(tolerance_mm >= 0.0) {
        return Err(MetricsError::NegativeTolerance(tolerance_mm));
    }
    let ba = boundary(a);
    let bb = boundary(b);
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let limit = tolerance_mm * tolerance_mm * (1.0 + 1e-12);
    let to_b = squared_distance_map(a.shape, a.spacing, &bb);
    let to_a = squared_distance_map(a.shape, a.spacing, &ba);
    let within = |pts: &[[usize; 3]], map: &[f64]| {
        pts.iter()
            .filter(|p| map[a.index(p[0], p[1], p[2])] <= limit)
            .count()
    };
    let hits = within(&ba, &to_b) + within(&bb, &to_a);
    Ok(hits as f64 / (ba.len() + bb.len()) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid3;

    fn cube(shape: [usize; 3], lo: [usize; 3], hi: [usize; 3]) -> Mask3D {
        let mut m = Grid3::filled(shape, [1.0; 3], false).unwrap();
        for i in 0..m.data.len() {
            let c = m.coords(i);
            m.data[i] = (0..3).all(|a| c[a] >= lo[a] && c[a] < hi[a]);
        }
        m
    }

    #[test]
    fn dice_examples() {
        let a = cube([6, 6, 6], [1, 1, 1], [3, 3, 3]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        let b = cube([6, 6, 6], [4, 4, 4], [6, 6, 6]);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
        let empty = cube([6, 6, 6], [0; 3], [0; 3]);
        assert_eq!(dice(&empty, &empty).unwrap(), 1.0);
        // |A| = |B| = 4, overlap 2
        let c = cube([6, 6, 6], [0, 0, 0], [4, 1, 1]);
        let d = cube([6, 6, 6], [2, 0, 0], [6, 1, 1]);
        assert_eq!(dice(&c, &d).unwrap(), 0.5);
        assert!(matches!(
            dice(&c, &cube([6, 6, 5], [0; 3], [1; 3])),
            Err(MetricsError::ShapeMismatch(..))
        ));
    }

    #[test]
    fn boundary_of_solid_cube_is_its_shell() {
        let m = cube([7, 7, 7], [1, 1, 1], [6, 6, 6]);
        // 5^3 - 3^3 = 98
        assert_eq!(boundary(&m).len(), 98);
        // a flat slab uses in-plane 8-connectivity; only the rim is boundary
        let slab = cube([5, 5, 1], [0, 0, 0], [5, 5, 1]);
        assert_eq!(boundary(&slab).len(), 16);
    }

    #[test]
    fn surface_dice_identity_and_saturation() {
        let a = cube([8, 8, 8], [1, 1, 1], [4, 5, 4]);
        let b = cube([8, 8, 8], [4, 3, 2], [7, 8, 8]);
        assert_eq!(surface_dice(&a, &a, 0.0).unwrap(), 1.0);
        let diag = (3.0 * 64.0f64).sqrt();
        assert_eq!(surface_dice(&a, &b, diag + 1.0).unwrap(), 1.0);
        assert!(surface_dice(&a, &b, 0.5).unwrap() < 1.0);
        assert!(matches!(
            surface_dice(&a, &b, -1.0),
            Err(MetricsError::NegativeTolerance(_))
        ));
    }

    #[test]
    fn edt_matches_brute_force_on_line() {
        let f = [FAR, 0.0, FAR, FAR, 0.0, FAR, FAR, FAR];
        let mut out = [0.0; 8];
        edt_1d(&f, 1.5, &mut out);
        let seeds = [1.0, 4.0];
        for (q, o) in out.iter().enumerate() {
            let best = seeds
                .iter()
                .map(|s| (1.5 * (q as f64 - s)).powi(2))
                .fold(f64::INFINITY, f64::min);
            assert!((o - best).abs() < 1e-12, "q={q}: {o} vs {best}");
        }
    }
}
