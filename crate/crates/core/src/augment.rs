//! Training-time augmentation of [`SliceStack`]s.
//!
//! Spatial transforms (flip, affine, elastic and the displacement part of
//! motion) move MR and label channels together: MR channels are resampled
//! bilinearly, label channels with nearest neighbour, and pixels that map
//! outside the image are filled with 0. Intensity and artifact transforms only
//! touch the MR channels. All randomness comes from the caller's RNG.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::volume::{bilinear_resize, SliceStack, MR_CHANNELS};

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("invalid augmentation config: {0}")]
    InvalidConfig(String),
}

pub type Result<T, E = AugmentError> = std::result::Result<T, E>;

fn invalid(msg: impl Into<String>) -> AugmentError {
    AugmentError::InvalidConfig(msg.into())
}

/// A transform applied with `probability`, its magnitude drawn uniformly from `range`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ranged {
    pub probability: f64,
    pub range: [f64; 2],
}

impl Ranged {
    pub const fn new(probability: f64, low: f64, high: f64) -> Self {
        Self {
            probability,
            range: [low, high],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlipConfig {
    /// Drawn independently for each enabled axis.
    pub probability: f64,
    pub horizontal: bool,
    pub vertical: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AffineConfig {
    pub probability: f64,
    pub rotation_deg: [f64; 2],
    pub scale: [f64; 2],
    /// Fraction of the image extent, per axis.
    pub translation: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ElasticConfig {
    pub probability: f64,
    /// Control-point spacing in pixels.
    pub control_spacing: usize,
    /// Standard deviation of control-point displacements in pixels.
    pub sigma: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub probability: f64,
    /// Displacement of the whole stack in pixels, per axis.
    pub translation_px: [f64; 2],
    /// Offset of the blended copy in pixels, per axis.
    pub ghost_px: [f64; 2],
    /// Weight of the blended copy.
    pub blend: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GhostingConfig {
    pub probability: f64,
    pub count: [usize; 2],
    pub intensity: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpikeConfig {
    pub probability: f64,
    pub count: [usize; 2],
    /// Spike magnitude relative to the zero-frequency coefficient.
    pub amplitude: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasFieldConfig {
    pub probability: f64,
    /// Total polynomial degree of the log-field.
    pub order: usize,
    pub coefficient: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub seed: u64,
    pub flip: FlipConfig,
    pub affine: AffineConfig,
    pub elastic: ElasticConfig,
    pub motion: MotionConfig,
    pub low_resolution: Ranged,
    pub bias_field: BiasFieldConfig,
    pub ghosting: GhostingConfig,
    pub spikes: SpikeConfig,
    pub contrast: Ranged,
    pub gamma: Ranged,
    pub brightness: Ranged,
    /// Standard deviation range in normalized intensity units.
    pub gaussian_noise: Ranged,
    pub rician_noise: Ranged,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let p = 0.5;
        Self {
            seed: 0,
            flip: FlipConfig {
                probability: p,
                horizontal: true,
                vertical: true,
            },
            affine: AffineConfig {
                probability: p,
                rotation_deg: [-15.0, 15.0],
                scale: [0.9, 1.1],
                translation: [-0.1, 0.1],
            },
            elastic: ElasticConfig {
                probability: p,
                control_spacing: 16,
                sigma: [0.0, 2.0],
            },
            motion: MotionConfig {
                probability: p,
                translation_px: [-2.0, 2.0],
                ghost_px: [-4.0, 4.0],
                blend: [0.0, 0.3],
            },
            low_resolution: Ranged::new(p, 1.0, 2.0),
            bias_field: BiasFieldConfig {
                probability: p,
                order: 3,
                coefficient: [-0.3, 0.3],
            },
            ghosting: GhostingConfig {
                probability: p,
                count: [2, 6],
                intensity: [0.0, 0.5],
            },
            spikes: SpikeConfig {
                probability: p,
                count: [1, 2],
                amplitude: [0.0, 0.1],
            },
            contrast: Ranged::new(p, 0.75, 1.25),
            gamma: Ranged::new(p, 0.7, 1.5),
            brightness: Ranged::new(p, -0.1, 0.1),
            gaussian_noise: Ranged::new(p, 0.0, 0.05),
            rician_noise: Ranged::new(p, 0.0, 0.05),
        }
    }
}

impl Default for FlipConfig {
    fn default() -> Self {
        AugmentConfig::default().flip
    }
}

impl Default for AffineConfig {
    fn default() -> Self {
        AugmentConfig::default().affine
    }
}

impl Default for ElasticConfig {
    fn default() -> Self {
        AugmentConfig::default().elastic
    }
}

impl Default for MotionConfig {
    fn default() -> Self {
        AugmentConfig::default().motion
    }
}

impl Default for GhostingConfig {
    fn default() -> Self {
        AugmentConfig::default().ghosting
    }
}

impl Default for SpikeConfig {
    fn default() -> Self {
        AugmentConfig::default().spikes
    }
}

impl Default for BiasFieldConfig {
    fn default() -> Self {
        AugmentConfig::default().bias_field
    }
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("{name}.probability {p} outside [0, 1]")));
    }
    Ok(())
}

fn check_range(name: &str, r: [f64; 2], min: f64, max: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite()) || r[0] > r[1] {
        return Err(invalid(format!(
            "{name} range {r:?} must be finite with low <= high"
        )));
    }
    if r[0] < min || r[1] > max {
        return Err(invalid(format!(
            "{name} range {r:?} outside [{min}, {max}]"
        )));
    }
    Ok(())
}

impl AugmentConfig {
    /// Every probability zero: the pipeline becomes the identity.
    pub fn disabled() -> Self {
        let mut c = Self::default();
        c.set_all_probabilities(0.0);
        c
    }

    pub fn set_all_probabilities(&mut self, p: f64) {
        self.flip.probability = p;
        self.affine.probability = p;
        self.elastic.probability = p;
        self.motion.probability = p;
        self.low_resolution.probability = p;
        self.bias_field.probability = p;
        self.ghosting.probability = p;
        self.spikes.probability = p;
        self.contrast.probability = p;
        self.gamma.probability = p;
        self.brightness.probability = p;
        self.gaussian_noise.probability = p;
        self.rician_noise.probability = p;
    }

    pub fn validate(&self) -> Result<()> {
        let inf = f64::INFINITY;
        check_probability("flip", self.flip.probability)?;
        check_probability("affine", self.affine.probability)?;
        check_range(
            "affine.rotation_deg",
            self.affine.rotation_deg,
            -180.0,
            180.0,
        )?;
        check_range("affine.scale", self.affine.scale, 1e-3, inf)?;
        check_range("affine.translation", self.affine.translation, -1.0, 1.0)?;
        check_probability("elastic", self.elastic.probability)?;
        if self.elastic.control_spacing < 2 {
            return Err(invalid("elastic.control_spacing must be at least 2"));
        }
        check_range("elastic.sigma", self.elastic.sigma, 0.0, inf)?;
        check_probability("motion", self.motion.probability)?;
        check_range(
            "motion.translation_px",
            self.motion.translation_px,
            -inf,
            inf,
        )?;
        check_range("motion.ghost_px", self.motion.ghost_px, -inf, inf)?;
        check_range("motion.blend", self.motion.blend, 0.0, 1.0)?;
        check_probability("low_resolution", self.low_resolution.probability)?;
        check_range("low_resolution", self.low_resolution.range, 1.0, inf)?;
        check_probability("bias_field", self.bias_field.probability)?;
        check_range(
            "bias_field.coefficient",
            self.bias_field.coefficient,
            -5.0,
            5.0,
        )?;
        check_probability("ghosting", self.ghosting.probability)?;
        let [c0, c1] = self.ghosting.count;
        if c0 < 2 || c0 > c1 {
            return Err(invalid(format!(
                "ghosting.count {:?} must satisfy 2 <= low <= high",
                self.ghosting.count
            )));
        }
        check_range("ghosting.intensity", self.ghosting.intensity, 0.0, 1.0)?;
        check_probability("spikes", self.spikes.probability)?;
        let [s0, s1] = self.spikes.count;
        if s0 < 1 || s0 > s1 {
            return Err(invalid(format!(
                "spikes.count {:?} must satisfy 1 <= low <= high",
                self.spikes.count
            )));
        }
        check_range("spikes.amplitude", self.spikes.amplitude, 0.0, inf)?;
        check_probability("contrast", self.contrast.probability)?;
        check_range("contrast", self.contrast.range, 0.0, inf)?;
        check_probability("gamma", self.gamma.probability)?;
        check_range("gamma", self.gamma.range, 1e-3, inf)?;
        check_probability("brightness", self.brightness.probability)?;
        check_range("brightness", self.brightness.range, -inf, inf)?;
        check_probability("gaussian_noise", self.gaussian_noise.probability)?;
        check_range("gaussian_noise", self.gaussian_noise.range, 0.0, inf)?;
        check_probability("rician_noise", self.rician_noise.probability)?;
        check_range("rician_noise", self.rician_noise.range, 0.0, inf)?;
        Ok(())
    }

    /// Draws the concrete transforms for one application, in pipeline order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Transform> {
        let mut out = Vec::new();
        let hit = |p: f64, rng: &mut R| rng.random_bool(p);
        let (h, v) = (
            self.flip.horizontal && hit(self.flip.probability, rng),
            self.flip.vertical && hit(self.flip.probability, rng),
        );
        if h || v {
            out.push(Transform::Spatial(SpatialTransform::Flip {
                horizontal: h,
                vertical: v,
            }));
        }
        if hit(self.affine.probability, rng) {
            let a = &self.affine;
            out.push(Transform::Spatial(SpatialTransform::Affine {
                rotation_deg: uniform(rng, a.rotation_deg),
                scale: uniform(rng, a.scale),
                translation: [uniform(rng, a.translation), uniform(rng, a.translation)],
            }));
        }
        if hit(self.elastic.probability, rng) {
            out.push(Transform::Spatial(SpatialTransform::Elastic {
                control_spacing: self.elastic.control_spacing,
                sigma: uniform(rng, self.elastic.sigma),
            }));
        }
        if hit(self.motion.probability, rng) {
            let m = &self.motion;
            out.push(Transform::Artifact(ArtifactTransform::Motion {
                translation_px: [
                    uniform(rng, m.translation_px),
                    uniform(rng, m.translation_px),
                ],
                ghost_px: [uniform(rng, m.ghost_px), uniform(rng, m.ghost_px)],
                blend: uniform(rng, m.blend),
            }));
        }
        if hit(self.low_resolution.probability, rng) {
            out.push(Transform::Intensity(IntensityTransform::LowResolution {
                factor: uniform(rng, self.low_resolution.range),
            }));
        }
        if hit(self.bias_field.probability, rng) {
            let n = bias_terms(self.bias_field.order);
            out.push(Transform::Artifact(ArtifactTransform::BiasField {
                order: self.bias_field.order,
                coefficients: (0..n)
                    .map(|_| uniform(rng, self.bias_field.coefficient))
                    .collect(),
            }));
        }
        if hit(self.ghosting.probability, rng) {
            let g = &self.ghosting;
            out.push(Transform::Artifact(ArtifactTransform::Ghosting {
                count: rng.random_range(g.count[0]..=g.count[1]),
                intensity: uniform(rng, g.intensity),
                vertical: rng.random_bool(0.5),
            }));
        }
        if hit(self.spikes.probability, rng) {
            let s = &self.spikes;
            out.push(Transform::Artifact(ArtifactTransform::Spikes {
                count: rng.random_range(s.count[0]..=s.count[1]),
                amplitude: uniform(rng, s.amplitude),
            }));
        }
        let intensity: [(&Ranged, fn(f64) -> IntensityTransform); 5] = [
            (&self.contrast, |factor| IntensityTransform::Contrast {
                factor,
            }),
            (&self.gamma, |gamma| IntensityTransform::Gamma { gamma }),
            (&self.brightness, |shift| IntensityTransform::Brightness {
                shift,
            }),
            (&self.gaussian_noise, |std| {
                IntensityTransform::GaussianNoise { std }
            }),
            (&self.rician_noise, |std| IntensityTransform::RicianNoise {
                std,
            }),
        ];
        for (cfg, make) in intensity {
            if hit(cfg.probability, rng) {
                out.push(Transform::Intensity(make(uniform(rng, cfg.range))));
            }
        }
        out
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..=r[1])
    }
}

/// Number of monomials `x^i y^j` with `i + j <= order`, excluding the constant.
fn bias_terms(order: usize) -> usize {
    (order + 1) * (order + 2) / 2 - 1
}

#[derive(Clone, Debug, PartialEq)]
pub enum SpatialTransform {
    Flip {
        horizontal: bool,
        vertical: bool,
    },
    /// Rotation and isotropic scale about the image centre, then translation
    /// by a fraction of the extent (`[y, x]`).
    Affine {
        rotation_deg: f64,
        scale: f64,
        translation: [f64; 2],
    },
    /// Random displacement field with control points every `control_spacing`
    /// pixels, bilinearly interpolated; point displacements ~ N(0, sigma²).
    Elastic {
        control_spacing: usize,
        sigma: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum IntensityTransform {
    GaussianNoise {
        std: f64,
    },
    /// Scales deviations from each channel's mean.
    Contrast {
        factor: f64,
    },
    Brightness {
        shift: f64,
    },
    /// Sign-preserving power `sign(v) |v|^gamma`.
    Gamma {
        gamma: f64,
    },
    /// Downsample by `factor`, then upsample back.
    LowResolution {
        factor: f64,
    },
    RicianNoise {
        std: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum ArtifactTransform {
    /// Translates the whole stack by `translation_px` (`[y, x]`), then blends
    /// the MR channels with a copy offset by `ghost_px` at weight `blend`.
    Motion {
        translation_px: [f64; 2],
        ghost_px: [f64; 2],
        blend: f64,
    },
    /// Attenuates all k-space lines except every `count`-th, producing
    /// replicas shifted by multiples of `1 / count` of the field of view.
    Ghosting {
        count: usize,
        intensity: f64,
        vertical: bool,
    },
    /// Adds `count` random single-frequency spikes of relative `amplitude`.
    Spikes { count: usize, amplitude: f64 },
    /// Multiplies by `exp(p(x, y))`, `p` a polynomial over `[-1, 1]²` with
    /// terms ordered by total degree then by the power of `y`.
    BiasField {
        order: usize,
        coefficients: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Transform {
    Spatial(SpatialTransform),
    Intensity(IntensityTransform),
    Artifact(ArtifactTransform),
}

/// Applies a randomly drawn pipeline to `stack`.
pub fn apply_pipeline<R: Rng + ?Sized>(
    stack: &SliceStack,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<SliceStack> {
    config.validate()?;
    let mut out = stack.clone();
    for t in config.sample(rng) {
        out = match &t {
            Transform::Spatial(s) => transform_spatial(&out, s, rng)?,
            Transform::Intensity(i) => transform_intensity(&out, i, rng)?,
            Transform::Artifact(a) => transform_artifact(&out, a, rng)?,
        };
    }
    Ok(out)
}

/// Per-(seed, epoch, sample) RNG so workers can augment samples in any order.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

fn sample_bilinear(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (y0, x0) = (y.floor(), x.floor());
    let (ty, tx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            src[yy as usize * w + xx as usize] as f64
        }
    };
    let top = if tx == 0.0 {
        at(y0, x0)
    } else {
        at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1.0) * tx
    };
    if ty == 0.0 {
        return top as f32;
    }
    let bottom = if tx == 0.0 {
        at(y0 + 1.0, x0)
    } else {
        at(y0 + 1.0, x0) * (1.0 - tx) + at(y0 + 1.0, x0 + 1.0) * tx
    };
    (top * (1.0 - ty) + bottom * ty) as f32
}

fn sample_nearest(src: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (yy, xx) = (y.round(), x.round());
    if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
        0.0
    } else {
        src[yy as usize * w + xx as usize]
    }
}

/// Backward warp: output pixel `(y, x)` reads the source at `coords[y * w + x]`.
fn warp(stack: &SliceStack, coords: &[(f64, f64)], labels_too: bool) -> SliceStack {
    let (h, w) = (stack.height, stack.width);
    let mut out = stack.clone();
    let last = if labels_too {
        stack.channels()
    } else {
        MR_CHANNELS
    };
    for c in 0..last {
        let src = stack.channel(c);
        let dst = out.channel_mut(c);
        for (d, &(y, x)) in dst.iter_mut().zip(coords) {
            *d = if c < MR_CHANNELS {
                sample_bilinear(src, h, w, y, x)
            } else {
                sample_nearest(src, h, w, y, x)
            };
        }
    }
    out
}

fn grid_coords(h: usize, w: usize, f: impl Fn(f64, f64) -> (f64, f64)) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(f(y as f64, x as f64));
        }
    }
    out
}

pub fn transform_spatial<R: Rng + ?Sized>(
    stack: &SliceStack,
    transform: &SpatialTransform,
    rng: &mut R,
) -> Result<SliceStack> {
    let (h, w) = (stack.height, stack.width);
    match *transform {
        SpatialTransform::Flip {
            horizontal,
            vertical,
        } => {
            let mut out = stack.clone();
            for c in 0..stack.channels() {
                let src = stack.channel(c);
                let dst = out.channel_mut(c);
                for y in 0..h {
                    let sy = if vertical { h - 1 - y } else { y };
                    for x in 0..w {
                        let sx = if horizontal { w - 1 - x } else { x };
                        dst[y * w + x] = src[sy * w + sx];
                    }
                }
            }
            Ok(out)
        }
        SpatialTransform::Affine {
            rotation_deg,
            scale,
            translation,
        } => {
            if !(scale > 0.0 && scale.is_finite())
                || !rotation_deg.is_finite()
                || !translation.iter().all(|t| t.is_finite())
            {
                return Err(invalid(format!(
                    "affine parameters out of range: {transform:?}"
                )));
            }
            let (s, c) = rotation_deg.to_radians().sin_cos();
            let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let (ty, tx) = (translation[0] * h as f64, translation[1] * w as f64);
            let coords = grid_coords(h, w, |y, x| {
                let (dy, dx) = (y - cy - ty, x - cx - tx);
                (
                    cy + (c * dy + s * dx) / scale,
                    cx + (c * dx - s * dy) / scale,
                )
            });
            Ok(warp(stack, &coords, true))
        }
        SpatialTransform::Elastic {
            control_spacing,
            sigma,
        } => {
            if control_spacing < 2 || !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(invalid(format!(
                    "elastic parameters out of range: {transform:?}"
                )));
            }
            if sigma == 0.0 {
                return Ok(stack.clone());
            }
            let gh = h.div_ceil(control_spacing) + 1;
            let gw = w.div_ceil(control_spacing) + 1;
            let normal = Normal::new(0.0, sigma).map_err(|e| invalid(e.to_string()))?;
            let dy: Vec<f32> = (0..gh * gw).map(|_| normal.sample(rng) as f32).collect();
            let dx: Vec<f32> = (0..gh * gw).map(|_| normal.sample(rng) as f32).collect();
            let sp = control_spacing as f64;
            let coords = grid_coords(h, w, |y, x| {
                let (gy, gx) = (y / sp, x / sp);
                (
                    y + sample_bilinear(&dy, gh, gw, gy, gx) as f64,
                    x + sample_bilinear(&dx, gh, gw, gy, gx) as f64,
                )
            });
            Ok(warp(stack, &coords, true))
        }
    }
}

fn map_mr(stack: &SliceStack, mut f: impl FnMut(f32) -> f32) -> SliceStack {
    let mut out = stack.clone();
    out.mr_data_mut().iter_mut().for_each(|v| *v = f(*v));
    out
}

pub fn transform_intensity<R: Rng + ?Sized>(
    stack: &SliceStack,
    transform: &IntensityTransform,
    rng: &mut R,
) -> Result<SliceStack> {
    let bad = || invalid(format!("intensity parameters out of range: {transform:?}"));
    match *transform {
        IntensityTransform::GaussianNoise { std } => {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(bad());
            }
            if std == 0.0 {
                return Ok(stack.clone());
            }
            let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
            Ok(map_mr(stack, |v| v + normal.sample(rng) as f32))
        }
        IntensityTransform::RicianNoise { std } => {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(bad());
            }
            if std == 0.0 {
                return Ok(stack.clone());
            }
            let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
            Ok(map_mr(stack, |v| {
                let (re, im) = (v as f64 + normal.sample(rng), normal.sample(rng));
                re.hypot(im) as f32
            }))
        }
        IntensityTransform::Contrast { factor } => {
            if !(factor >= 0.0 && factor.is_finite()) {
                return Err(bad());
            }
            let mut out = stack.clone();
            let f = factor as f32;
            for c in 0..MR_CHANNELS {
                let ch = out.channel_mut(c);
                let mean = (ch.iter().map(|v| *v as f64).sum::<f64>() / ch.len() as f64) as f32;
                if factor != 1.0 {
                    ch.iter_mut().for_each(|v| *v = mean + (*v - mean) * f);
                }
            }
            Ok(out)
        }
        IntensityTransform::Brightness { shift } => {
            if !shift.is_finite() {
                return Err(bad());
            }
            let s = shift as f32;
            Ok(map_mr(stack, |v| v + s))
        }
        IntensityTransform::Gamma { gamma } => {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return Err(bad());
            }
            if gamma == 1.0 {
                return Ok(stack.clone());
            }
            let g = gamma as f32;
            Ok(map_mr(stack, |v| v.signum() * v.abs().powf(g)))
        }
        IntensityTransform::LowResolution { factor } => {
            if !(factor >= 1.0 && factor.is_finite()) {
                return Err(bad());
            }
            let (h, w) = (stack.height, stack.width);
            let nh = ((h as f64 / factor).round() as usize).max(1);
            let nw = ((w as f64 / factor).round() as usize).max(1);
            if (nh, nw) == (h, w) {
                return Ok(stack.clone());
            }
            let mut out = stack.clone();
            for c in 0..MR_CHANNELS {
                let small = bilinear_resize(stack.channel(c), h, w, nh, nw);
                let back = bilinear_resize(&small, nh, nw, h, w);
                out.channel_mut(c).copy_from_slice(&back);
            }
            Ok(out)
        }
    }
}

/// In-place 2D DFT of a row-major `h x w` plane (unnormalized both ways).
fn fft2(
    planner: &mut FftPlanner<f64>,
    data: &mut [Complex<f64>],
    h: usize,
    w: usize,
    inverse: bool,
) {
    let row = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    row.process(data);
    let col = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut buf = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            buf[y] = data[y * w + x];
        }
        col.process(&mut buf);
        for y in 0..h {
            data[y * w + x] = buf[y];
        }
    }
}

/// Runs `edit` on the spectrum of each MR channel and writes back the real part.
fn edit_spectrum(stack: &SliceStack, mut edit: impl FnMut(&mut [Complex<f64>])) -> SliceStack {
    let (h, w) = (stack.height, stack.width);
    let mut planner = FftPlanner::new();
    let mut out = stack.clone();
    let norm = (h * w) as f64;
    for c in 0..MR_CHANNELS {
        let mut spec: Vec<Complex<f64>> = stack
            .channel(c)
            .iter()
            .map(|v| Complex::new(*v as f64, 0.0))
            .collect();
        fft2(&mut planner, &mut spec, h, w, false);
        edit(&mut spec);
        fft2(&mut planner, &mut spec, h, w, true);
        for (d, s) in out.channel_mut(c).iter_mut().zip(&spec) {
            *d = (s.re / norm) as f32;
        }
    }
    out
}

fn bias_field(h: usize, w: usize, order: usize, coefficients: &[f64]) -> Vec<f32> {
    let norm = |i: usize, n: usize| {
        if n > 1 {
            2.0 * i as f64 / (n - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    let mut field = Vec::with_capacity(h * w);
    for y in 0..h {
        let yn = norm(y, h);
        for x in 0..w {
            let xn = norm(x, w);
            let mut p = 0.0;
            let mut k = 0;
            for degree in 1..=order {
                for j in 0..=degree {
                    p += coefficients[k] * xn.powi((degree - j) as i32) * yn.powi(j as i32);
                    k += 1;
                }
            }
            field.push(p.clamp(-20.0, 20.0).exp() as f32);
        }
    }
    field
}

pub fn transform_artifact<R: Rng + ?Sized>(
    stack: &SliceStack,
    transform: &ArtifactTransform,
    rng: &mut R,
) -> Result<SliceStack> {
    let bad = || invalid(format!("artifact parameters out of range: {transform:?}"));
    let (h, w) = (stack.height, stack.width);
    match transform {
        ArtifactTransform::Motion {
            translation_px,
            ghost_px,
            blend,
        } => {
            if !(0.0..=1.0).contains(blend)
                || !translation_px.iter().chain(ghost_px).all(|v| v.is_finite())
            {
                return Err(bad());
            }
            let [ty, tx] = *translation_px;
            let moved = if ty == 0.0 && tx == 0.0 {
                stack.clone()
            } else {
                warp(stack, &grid_coords(h, w, |y, x| (y - ty, x - tx)), true)
            };
            if *blend == 0.0 {
                return Ok(moved);
            }
            let [gy, gx] = *ghost_px;
            let ghost = warp(&moved, &grid_coords(h, w, |y, x| (y - gy, x - gx)), false);
            let b = *blend as f32;
            let mut out = moved;
            for (v, g) in out.mr_data_mut().iter_mut().zip(ghost.mr_data()) {
                *v = (1.0 - b) * *v + b * g;
            }
            Ok(out)
        }
        ArtifactTransform::Ghosting {
            count,
            intensity,
            vertical,
        } => {
            if *count < 2 || !(0.0..=1.0).contains(intensity) {
                return Err(bad());
            }
            if *intensity == 0.0 {
                return Ok(stack.clone());
            }
            let keep = 1.0 - intensity;
            Ok(edit_spectrum(stack, |spec| {
                for y in 0..h {
                    for x in 0..w {
                        let line = if *vertical { y } else { x };
                        if line % count != 0 {
                            spec[y * w + x] *= keep;
                        }
                    }
                }
            }))
        }
        ArtifactTransform::Spikes { count, amplitude } => {
            if !(*amplitude >= 0.0 && amplitude.is_finite()) {
                return Err(bad());
            }
            if *amplitude == 0.0 || *count == 0 || h * w < 2 {
                return Ok(stack.clone());
            }
            let bins: Vec<(usize, usize)> = (0..*count)
                .map(|_| loop {
                    let b = (rng.random_range(0..h), rng.random_range(0..w));
                    if b != (0, 0) {
                        break b;
                    }
                })
                .collect();
            Ok(edit_spectrum(stack, |spec| {
                let dc = spec[0].norm();
                for &(y, x) in &bins {
                    let spike = Complex::new(amplitude * dc, 0.0);
                    spec[y * w + x] += spike;
                    let (my, mx) = ((h - y) % h, (w - x) % w);
                    if (my, mx) != (y, x) {
                        spec[my * w + mx] += spike;
                    }
                }
            }))
        }
        ArtifactTransform::BiasField {
            order,
            coefficients,
        } => {
            if coefficients.len() != bias_terms(*order)
                || !coefficients.iter().all(|c| c.is_finite())
            {
                return Err(bad());
            }
            if coefficients.iter().all(|c| *c == 0.0) {
                return Ok(stack.clone());
            }
            let field = bias_field(h, w, *order, coefficients);
            let mut out = stack.clone();
            for c in 0..MR_CHANNELS {
                for (v, f) in out.channel_mut(c).iter_mut().zip(&field) {
                    *v *= f;
                }
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{Axis, Encoding, Normalization};

    fn stack(encoding: Encoding, seed: u64) -> SliceStack {
        let (h, w) = (16, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data: Vec<f32> = (0..MR_CHANNELS * h * w)
            .map(|_| rng.random::<f32>())
            .collect();
        let labels: Vec<u8> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                let r2 = (y as f64 - 8.0).powi(2) + (x as f64 - 6.0).powi(2);
                if r2 < 4.0 {
                    4
                } else if r2 < 9.0 {
                    1
                } else if r2 < 20.0 {
                    2
                } else {
                    0
                }
            })
            .collect();
        for ch in crate::volume::encode_labels(&labels, encoding).unwrap() {
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
            normalization: Normalization::Minmax,
        }
    }

    #[test]
    fn disabled_pipeline_is_identity() {
        let s = stack(Encoding::Brats, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(
            apply_pipeline(&s, &AugmentConfig::disabled(), &mut rng).unwrap(),
            s
        );
    }

    #[test]
    fn double_flip_is_identity_and_preserves_counts() {
        let s = stack(Encoding::Brats, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (h, v) in [(true, false), (false, true), (true, true)] {
            let t = SpatialTransform::Flip {
                horizontal: h,
                vertical: v,
            };
            let once = transform_spatial(&s, &t, &mut rng).unwrap();
            for c in MR_CHANNELS..s.channels() {
                let count = |st: &SliceStack| st.channel(c).iter().filter(|v| **v > 0.0).count();
                assert_eq!(count(&once), count(&s));
            }
            assert_eq!(transform_spatial(&once, &t, &mut rng).unwrap(), s);
        }
    }

    #[test]
    fn neutral_parameters_are_identity() {
        let s = stack(Encoding::Single, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spatial = [
            SpatialTransform::Affine {
                rotation_deg: 0.0,
                scale: 1.0,
                translation: [0.0, 0.0],
            },
            SpatialTransform::Elastic {
                control_spacing: 4,
                sigma: 0.0,
            },
        ];
        for t in &spatial {
            assert_eq!(&transform_spatial(&s, t, &mut rng).unwrap(), &s, "{t:?}");
        }
        let intensity = [
            IntensityTransform::Gamma { gamma: 1.0 },
            IntensityTransform::Contrast { factor: 1.0 },
            IntensityTransform::Brightness { shift: 0.0 },
            IntensityTransform::LowResolution { factor: 1.0 },
            IntensityTransform::GaussianNoise { std: 0.0 },
        ];
        for t in &intensity {
            assert_eq!(&transform_intensity(&s, t, &mut rng).unwrap(), &s, "{t:?}");
        }
        let artifact = [
            ArtifactTransform::BiasField {
                order: 2,
                coefficients: vec![0.0; 5],
            },
            ArtifactTransform::Spikes {
                count: 2,
                amplitude: 0.0,
            },
            ArtifactTransform::Ghosting {
                count: 3,
                intensity: 0.0,
                vertical: true,
            },
            ArtifactTransform::Motion {
                translation_px: [0.0, 0.0],
                ghost_px: [2.0, 1.0],
                blend: 0.0,
            },
        ];
        for t in &artifact {
            assert_eq!(&transform_artifact(&s, t, &mut rng).unwrap(), &s, "{t:?}");
        }
    }

    #[test]
    fn noise_changes_mr_only() {
        let s = stack(Encoding::Brats, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let out = transform_intensity(
            &s,
            &IntensityTransform::GaussianNoise { std: 0.05 },
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.label_data(), s.label_data());
        assert_ne!(out.mr_data(), s.mr_data());
    }

    #[test]
    fn ghosting_with_full_intensity_averages_replicas() {
        let s = stack(Encoding::Single, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = ArtifactTransform::Ghosting {
            count: 2,
            intensity: 1.0,
            vertical: true,
        };
        let out = transform_artifact(&s, &t, &mut rng).unwrap();
        // keeping only even k-lines averages the image with its half-FOV shift
        let (h, w) = (s.height, s.width);
        let src = s.channel(0);
        for y in 0..h {
            for x in 0..w {
                let expect = 0.5 * (src[y * w + x] + src[((y + h / 2) % h) * w + x]);
                assert!((out.channel(0)[y * w + x] - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = AugmentConfig::default();
        c.gamma.probability = 1.5;
        assert!(matches!(c.validate(), Err(AugmentError::InvalidConfig(_))));
        let mut c = AugmentConfig::default();
        c.affine.scale = [1.1, 0.9];
        let s = stack(Encoding::Single, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(apply_pipeline(&s, &c, &mut rng).is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = AugmentConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<AugmentConfig>(&text).unwrap(), c);
        assert!(toml::from_str::<AugmentConfig>("bogus = 1").is_err());
        let partial: AugmentConfig = toml::from_str("seed = 9").unwrap();
        assert_eq!(partial.seed, 9);
    }
}
