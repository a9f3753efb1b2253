//! Brute-force oracles, random instance generators and the shared checks
//! behind the acceptance suite.
#![allow(dead_code)]

use std::collections::HashSet;

use dqe::augment::{
    apply_pipeline, sample_rng, transform_artifact, transform_intensity, ArtifactTransform,
    AugmentConfig, Transform,
};
use dqe::metrics::{bland_altman, dice, mae, pearson_r, rmse, surface_dice, PairedSeries};
use dqe::net::{
    build_model, load_checkpoint, save_checkpoint, train, DenseNet, DenseNetSpec, Mode, NetError,
    Tensor, TrainConfig, TrainSample,
};
use dqe::ratings::split_dataset;
use dqe::synth::{degrade_segmentation, generate_phantom, PhantomParams};
use dqe::volume::{
    center_of_mass, encode_labels, extract_com_slices, Axis, Encoding, Grid3, Mask3D,
    Normalization, SliceStack, TissueSeg, MR_CHANNELS,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// ---------------------------------------------------------------- oracles

pub fn oracle_mae(p: &[f64], r: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - r[i]).abs();
    }
    s / p.len() as f64
}

pub fn oracle_rmse(p: &[f64], r: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        s += (p[i] - r[i]) * (p[i] - r[i]);
    }
    (s / p.len() as f64).sqrt()
}

/// Pearson r as the mean product of z-scores (population standard deviations).
pub fn oracle_pearson(p: &[f64], r: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mp = p.iter().sum::<f64>() / n;
    let mr = r.iter().sum::<f64>() / n;
    let sp = (p.iter().map(|v| (v - mp).powi(2)).sum::<f64>() / n).sqrt();
    let sr = (r.iter().map(|v| (v - mr).powi(2)).sum::<f64>() / n).sqrt();
    p.iter()
        .zip(r)
        .map(|(a, b)| (a - mp) / sp * ((b - mr) / sr))
        .sum::<f64>()
        / n
}

/// Mean difference, sample SD and the 1.96·SD limits.
pub fn oracle_bland_altman(p: &[f64], r: &[f64]) -> (f64, f64, f64, f64) {
    let d: Vec<f64> = p.iter().zip(r).map(|(a, b)| a - b).collect();
    let n = d.len() as f64;
    let m = d.iter().sum::<f64>() / n;
    let sd = if d.len() > 1 {
        (d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd, m - 1.96 * sd, m + 1.96 * sd)
}

fn voxels(mask: &Mask3D) -> HashSet<[usize; 3]> {
    let [sx, sy, sz] = mask.shape;
    let mut out = HashSet::new();
    for x in 0..sx {
        for y in 0..sy {
            for z in 0..sz {
                if mask.get(x, y, z) {
                    out.insert([x, y, z]);
                }
            }
        }
    }
    out
}

pub fn oracle_dice(a: &Mask3D, b: &Mask3D) -> f64 {
    let (va, vb) = (voxels(a), voxels(b));
    if va.is_empty() && vb.is_empty() {
        return 1.0;
    }
    2.0 * va.intersection(&vb).count() as f64 / (va.len() + vb.len()) as f64
}

/// Foreground voxels touching background or the grid edge; the neighbourhood is
/// face-adjacent in 3D and 8-connected in-plane for single-slice grids.
pub fn oracle_boundary(mask: &Mask3D) -> Vec<[usize; 3]> {
    let fg = voxels(mask);
    let flat: Vec<usize> = (0..3).filter(|a| mask.shape[*a] == 1).collect();
    let mut neighbours: Vec<[i64; 3]> = Vec::new();
    for dx in -1..=1i64 {
        for dy in -1..=1i64 {
            for dz in -1..=1i64 {
                let d = [dx, dy, dz];
                let nonzero = d.iter().filter(|v| **v != 0).count();
                let ok = if flat.len() == 1 {
                    nonzero > 0 && d[flat[0]] == 0
                } else {
                    nonzero == 1 && (0..3).all(|a| d[a] == 0 || mask.shape[a] > 1)
                };
                if ok {
                    neighbours.push(d);
                }
            }
        }
    }
    let mut out: Vec<[usize; 3]> = fg
        .iter()
        .filter(|c| {
            neighbours.iter().any(|d| {
                let n: Vec<i64> = (0..3).map(|a| c[a] as i64 + d[a]).collect();
                if (0..3).any(|a| n[a] < 0 || n[a] >= mask.shape[a] as i64) {
                    return true;
                }
                !fg.contains(&[n[0] as usize, n[1] as usize, n[2] as usize])
            })
        })
        .copied()
        .collect();
    out.sort();
    out
}

/// Symmetric surface Dice by comparing every boundary pair.
pub fn oracle_surface_dice(a: &Mask3D, b: &Mask3D, tol: f64) -> f64 {
    let (ba, bb) = (oracle_boundary(a), oracle_boundary(b));
    if ba.is_empty() && bb.is_empty() {
        return 1.0;
    }
    if ba.is_empty() || bb.is_empty() {
        return 0.0;
    }
    let dist = |p: &[usize; 3], q: &[usize; 3]| {
        (0..3)
            .map(|k| ((p[k] as f64 - q[k] as f64) * a.spacing[k]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let near = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter()
            .filter(|p| to.iter().any(|q| dist(p, q) <= tol + 1e-12))
            .count()
    };
    (near(&ba, &bb) + near(&bb, &ba)) as f64 / (ba.len() + bb.len()) as f64
}

pub fn oracle_com(mask: &Mask3D) -> Option<[f64; 3]> {
    let v = voxels(mask);
    if v.is_empty() {
        return None;
    }
    let mut c = [0.0; 3];
    for p in &v {
        for a in 0..3 {
            c[a] += p[a] as f64;
        }
    }
    Some(c.map(|s| s / v.len() as f64))
}

// ------------------------------------------------------------- generators

pub fn random_mask(rng: &mut ChaCha8Rng, shape: [usize; 3], spacing: [f64; 3]) -> Mask3D {
    let density = rng.random_range(0.05..0.7);
    let n = shape.iter().product();
    Grid3::new(
        shape,
        spacing,
        (0..n).map(|_| rng.random_bool(density)).collect(),
    )
    .unwrap()
}

pub fn random_shape(rng: &mut ChaCha8Rng) -> [usize; 3] {
    if rng.random_bool(0.2) {
        let mut s = [
            rng.random_range(2..8),
            rng.random_range(2..8),
            rng.random_range(2..8),
        ];
        s[rng.random_range(0..3)] = 1;
        s
    } else {
        [
            rng.random_range(1..7),
            rng.random_range(1..7),
            rng.random_range(1..7),
        ]
    }
}

pub fn random_series(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.random_range(2..40);
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..6.0)).collect();
    let p: Vec<f64> = r
        .iter()
        .map(|v| v * rng.random_range(-0.5..1.5) + rng.random_range(-2.0..2.0))
        .collect();
    (p, r)
}

pub fn random_seg(rng: &mut ChaCha8Rng, shape: [usize; 3]) -> TissueSeg {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| [0u8, 1, 2, 4][rng.random_range(0..4)])
        .collect();
    TissueSeg::new(Grid3::new(shape, [1.0; 3], data).unwrap()).unwrap()
}

pub fn random_stack(rng: &mut ChaCha8Rng, encoding: Encoding) -> SliceStack {
    let (h, w) = (rng.random_range(8..24), rng.random_range(8..24));
    let labels: Vec<u8> = (0..h * w)
        .map(|_| [0u8, 1, 2, 4][rng.random_range(0..4)])
        .collect();
    let mut data: Vec<f32> = (0..MR_CHANNELS * h * w)
        .map(|_| rng.random_range(0.0..1.0))
        .collect();
    for ch in encode_labels(&labels, encoding).unwrap() {
        data.extend(ch);
    }
    SliceStack {
        height: h,
        width: w,
        label_channels: encoding.label_channels(),
        data,
        axis: Axis::Axial,
        slice_index: 0,
        encoding,
        normalization: Normalization::Percentile,
    }
}

/// An augmentation config with random probabilities and parameter ranges
/// inside the valid domain.
pub fn random_augment(rng: &mut ChaCha8Rng) -> AugmentConfig {
    let mut c = AugmentConfig::default();
    c.set_all_probabilities(rng.random_range(0.0..=1.0));
    c.seed = rng.random();
    c
}

// ----------------------------------------------------------------- checks

pub fn check_metric_oracles(instances: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    let tol = 1e-9;
    for i in 0..instances {
        let (p, r) = random_series(&mut rng);
        let s = PairedSeries::new(p.clone(), r.clone()).unwrap();
        let (m, e) = (mae(&s), rmse(&s));
        if !close(m, oracle_mae(&p, &r), tol) || !close(e, oracle_rmse(&p, &r), tol) {
            return Err(format!(
                "instance {i}: mae/rmse {m}/{e} disagree with the oracle"
            ));
        }
        if e + 1e-12 < m {
            return Err(format!("instance {i}: rmse {e} < mae {m}"));
        }
        let pr = pearson_r(&s).unwrap();
        if !close(pr, oracle_pearson(&p, &r), tol) {
            return Err(format!(
                "instance {i}: pearson {pr} vs {}",
                oracle_pearson(&p, &r)
            ));
        }
        let ba = bland_altman(&s);
        let (om, osd, olo, ohi) = oracle_bland_altman(&p, &r);
        if ![
            (ba.mean_diff, om),
            (ba.sd_diff, osd),
            (ba.loa_low, olo),
            (ba.loa_high, ohi),
        ]
        .iter()
        .all(|(x, y)| close(*x, *y, tol))
        {
            return Err(format!(
                "instance {i}: bland-altman {ba:?} vs {:?}",
                (om, osd, olo, ohi)
            ));
        }

        let shape = random_shape(&mut rng);
        let spacing = [(); 3].map(|_| rng.random_range(0.5..2.0));
        let a = random_mask(&mut rng, shape, spacing);
        let b = random_mask(&mut rng, shape, spacing);
        let d = dice(&a, &b).unwrap();
        if !close(d, oracle_dice(&a, &b), tol) {
            return Err(format!("instance {i}: dice {d} vs {}", oracle_dice(&a, &b)));
        }
        let t = rng.random_range(0.0..3.0);
        let sd = surface_dice(&a, &b, t).unwrap();
        let osd = oracle_surface_dice(&a, &b, t);
        if !close(sd, osd, tol) {
            return Err(format!(
                "instance {i}: surface dice {sd} vs {osd} (shape {shape:?}, tolerance {t})"
            ));
        }
    }
    Ok(format!(
        "{instances} random instances agree within 1e-9; rmse >= mae on all"
    ))
}

pub fn check_encoding(instances: usize, seed: u64) -> Check {
    let table = encode_labels(&[4, 1, 2, 0], Encoding::Brats).map_err(|e| e.to_string())?;
    let expected = [
        [1.0, 1.0, 1.0],
        [0.0, 1.0, 1.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, 0.0],
    ];
    for (v, row) in expected.iter().enumerate() {
        let got = [table[0][v], table[1][v], table[2][v]];
        if got != row.map(|x| x as f32) {
            return Err(format!("truth table row {v}: {got:?}"));
        }
    }
    let mut rng = rng(seed);
    for i in 0..instances {
        let shape = [
            rng.random_range(1..8),
            rng.random_range(1..8),
            rng.random_range(1..8),
        ];
        let seg = random_seg(&mut rng, shape);
        let ch = encode_labels(seg.data(), Encoding::Brats).map_err(|e| e.to_string())?;
        for k in 0..seg.data().len() {
            if !(ch[0][k] <= ch[1][k] && ch[1][k] <= ch[2][k]) {
                return Err(format!(
                    "instance {i} voxel {k}: ET/TC/WT {} {} {}",
                    ch[0][k], ch[1][k], ch[2][k]
                ));
            }
        }
    }
    Ok(format!(
        "truth table exact; ET within TC within WT on {instances} random segmentations"
    ))
}

pub fn check_center_of_mass(instances: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    for i in 0..instances {
        let shape = [
            rng.random_range(1..12),
            rng.random_range(1..12),
            rng.random_range(1..12),
        ];
        let mut m = random_mask(&mut rng, shape, [1.0; 3]);
        let k = rng.random_range(0..m.data.len());
        m.data[k] = true;
        let got = center_of_mass(&m).map_err(|e| e.to_string())?;
        let want = oracle_com(&m).expect("nonempty");
        if !(0..3).all(|a| close(got[a], want[a], 1e-9)) {
            return Err(format!("instance {i}: {got:?} vs {want:?}"));
        }
    }
    for seed in 0..3 {
        let exam = generate_phantom(&PhantomParams::with_seed(seed)).map_err(|e| e.to_string())?;
        for axis in Axis::ALL {
            for enc in Encoding::ALL {
                for norm in Normalization::ALL {
                    let a = extract_com_slices(&exam, axis, enc, norm);
                    let b = extract_com_slices(&exam, axis, enc, norm);
                    let bits =
                        |s: &SliceStack| s.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                    if bits(&a) != bits(&b) || a.slice_index != b.slice_index {
                        return Err(format!(
                            "extraction not deterministic for {axis:?}/{enc}/{norm}"
                        ));
                    }
                }
            }
        }
    }
    Ok(format!(
        "{instances} masks match the exhaustive oracle within 1e-9; extraction bit-exact"
    ))
}

pub fn check_augmentation(runs: usize, seed: u64) -> Check {
    let mut rng = rng(seed);
    for enc in Encoding::ALL {
        let stack = random_stack(&mut rng, enc);
        let mut off = AugmentConfig::default();
        off.set_all_probabilities(0.0);
        for cfg in [AugmentConfig::disabled(), off] {
            let out = apply_pipeline(&stack, &cfg, &mut sample_rng(1, 2, 3))
                .map_err(|e| e.to_string())?;
            if out != stack {
                return Err("identity configuration changed the input".into());
            }
        }
    }
    for i in 0..runs {
        let enc = Encoding::ALL[i % 2];
        let stack = random_stack(&mut rng, enc);
        let cfg = random_augment(&mut rng);
        let (e, k) = (rng.random_range(0..100), rng.random_range(0..1000));
        let a = apply_pipeline(&stack, &cfg, &mut sample_rng(cfg.seed, e, k))
            .map_err(|e| e.to_string())?;
        let b = apply_pipeline(&stack, &cfg, &mut sample_rng(cfg.seed, e, k))
            .map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("run {i}: same seed gave different outputs"));
        }
        if a.data.iter().any(|v| !v.is_finite())
            || (a.height, a.width) != (stack.height, stack.width)
        {
            return Err(format!("run {i}: non-finite output or changed shape"));
        }
        if enc == Encoding::Brats {
            let p = a.plane();
            let l = a.label_data();
            let binary = l.iter().all(|v| *v == 0.0 || *v == 1.0);
            let nested = (0..p).all(|j| l[j] <= l[p + j] && l[p + j] <= l[2 * p + j]);
            if !binary || !nested {
                return Err(format!(
                    "run {i}: brats label channels not binary and nested after the pipeline"
                ));
            }
        }
        let mut r = sample_rng(cfg.seed, e, k);
        let mut cur = stack.clone();
        for t in cfg.sample(&mut r) {
            let next = match &t {
                Transform::Spatial(_) => continue,
                Transform::Intensity(x) => transform_intensity(&cur, x, &mut r),
                Transform::Artifact(x) => transform_artifact(&cur, x, &mut r),
            }
            .map_err(|e| e.to_string())?;
            let expected = match &t {
                Transform::Artifact(ArtifactTransform::Motion {
                    translation_px,
                    ghost_px,
                    ..
                }) => {
                    let displacement = ArtifactTransform::Motion {
                        translation_px: *translation_px,
                        ghost_px: *ghost_px,
                        blend: 0.0,
                    };
                    transform_artifact(&cur, &displacement, &mut r).map_err(|e| e.to_string())?
                }
                _ => cur.clone(),
            };
            if next.label_data() != expected.label_data() {
                return Err(format!("run {i}: {t:?} touched label channels"));
            }
            cur = next;
        }
    }
    Ok(format!(
        "identity exact; {runs} randomized runs deterministic, finite, labels untouched"
    ))
}

fn grad_loss(net: &mut DenseNet<f64>, x: &Tensor<f64>, targets: &[f64]) -> f64 {
    let y = net.forward(x, Mode::Train);
    y.iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        / y.len() as f64
}

/// Worst relative error between backprop and central differences of the MSE
/// objective over `count` random parameters of the tiny network.
pub fn worst_gradient_error(channels: usize, count: usize, seed: u64) -> f64 {
    const EPS: f64 = 1e-6;
    const FLOOR: f64 = 1e-7;
    let mut rng = rng(seed);
    let mut net = DenseNet::<f64>::new(DenseNetSpec::tiny(channels), &mut rng).unwrap();
    let (n, h, w) = (3, 32, 32);
    let x = Tensor::from_vec(
        n,
        channels,
        h,
        w,
        (0..n * channels * h * w)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );
    let targets: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..6.0)).collect();
    net.zero_grad();
    let y = net.forward(&x, Mode::Train);
    let dout: Vec<f64> = y
        .iter()
        .zip(&targets)
        .map(|(p, t)| 2.0 * (p - t) / n as f64)
        .collect();
    net.backward(&dout);
    let analytic: Vec<Vec<f64>> = net.params_mut().iter().map(|p| p.grad.clone()).collect();
    let total: usize = analytic.iter().map(Vec::len).sum();
    let mut worst = 0.0f64;
    for flat in sample(&mut rng, total, count) {
        let (mut pi, mut off) = (0, flat);
        while off >= analytic[pi].len() {
            off -= analytic[pi].len();
            pi += 1;
        }
        let original = net.params_mut()[pi].value[off];
        net.params_mut()[pi].value[off] = original + EPS;
        let plus = grad_loss(&mut net, &x, &targets);
        net.params_mut()[pi].value[off] = original - EPS;
        let minus = grad_loss(&mut net, &x, &targets);
        net.params_mut()[pi].value[off] = original;
        let numeric = (plus - minus) / (2.0 * EPS);
        let a = analytic[pi][off];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR));
    }
    worst
}

pub fn check_gradient() -> Check {
    let worst = worst_gradient_error(7, 100, 21).max(worst_gradient_error(5, 100, 22));
    if worst <= 1e-4 {
        Ok(format!(
            "worst relative error {worst:.2e} over 2 x 100 parameters"
        ))
    } else {
        Err(format!("worst relative error {worst:.2e} exceeds 1e-4"))
    }
}

pub fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        input_size: [32, 32],
        batch_size: 4,
        epochs,
        augment: AugmentConfig::disabled(),
        ..TrainConfig::default()
    }
}

/// One view per phantom, degraded to match its label.
pub fn labelled_samples(labels: &[f64]) -> Vec<TrainSample> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let exam = generate_phantom(&PhantomParams::with_seed(i as u64)).unwrap();
            let seg = degrade_segmentation(&exam.seg, (6.0 - label) / 5.0, i as u64).unwrap();
            let exam = exam.with_seg(seg).unwrap();
            TrainSample::views_of(&exam, Encoding::Brats, Normalization::Percentile, label)
                .remove(0)
        })
        .collect()
}

pub fn check_checkpoint() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data = labelled_samples(&[2.0, 3.5, 5.0]);
    let ckpt = train(&data, &small_config(2)).map_err(|e| e.to_string())?;
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&ckpt, &path).map_err(|e| e.to_string())?;
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    let probe: Vec<SliceStack> = data.iter().map(|s| s.stack.clone()).collect();
    let bits = |c: &dqe::net::Checkpoint| -> Result<Vec<u64>, String> {
        Ok(c.predict_raw(&probe)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|v| v.to_bits())
            .collect())
    };
    if bits(&ckpt)? != bits(&back)? || back.history != ckpt.history || back.config != ckpt.config {
        return Err("reloaded checkpoint differs".into());
    }
    let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    let corrupt = dir.path().join("corrupt.ckpt");
    std::fs::write(&corrupt, &bytes).map_err(|e| e.to_string())?;
    let truncated = dir.path().join("truncated.ckpt");
    std::fs::write(&truncated, &bytes[..mid]).map_err(|e| e.to_string())?;
    for p in [&corrupt, &truncated] {
        if !matches!(load_checkpoint(p), Err(NetError::CorruptCheckpoint(_))) {
            return Err(format!("{} was not detected as corrupt", p.display()));
        }
    }
    build_model(&small_config(1)).map_err(|e| e.to_string())?;
    Ok("predictions bit-identical after reload; flipped and truncated files rejected".into())
}

pub fn check_overfit() -> Check {
    let data = labelled_samples(&[1.5, 3.0, 4.5, 6.0]);
    let ckpt = train(&data, &small_config(60)).map_err(|e| e.to_string())?;
    let last = *ckpt.history.last().expect("history");
    if last < 0.1 {
        Ok(format!(
            "training MSE {:.3} -> {last:.4} after 60 epochs",
            ckpt.history[0]
        ))
    } else {
        Err(format!("training MSE {last:.4} after 60 epochs"))
    }
}

pub fn check_split() -> Check {
    let ids: Vec<String> = (0..75).map(|i| format!("exam{i:03}")).collect();
    let (train, test) = split_dataset(&ids, 0.8, 42).map_err(|e| e.to_string())?;
    if (train.len(), test.len()) != (60, 15) {
        return Err(format!("split sizes {}/{}", train.len(), test.len()));
    }
    let train_set: HashSet<_> = train.iter().collect();
    if test.iter().any(|t| train_set.contains(t)) || train.len() + test.len() != ids.len() {
        return Err("split sides overlap or lose exams".into());
    }
    if split_dataset(&ids, 0.8, 42).map_err(|e| e.to_string())? != (train.clone(), test.clone()) {
        return Err("split is not deterministic".into());
    }
    if split_dataset(&ids, 0.8, 43).map_err(|e| e.to_string())?.1 == test {
        return Err("different seeds gave the same split".into());
    }
    Ok("75 exams -> 60/15, disjoint, deterministic per seed".into())
}
