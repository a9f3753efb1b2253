//! Training configuration, model construction and the MSE training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::FORMAT_VERSION;
use super::densenet::{Arch, DenseNet, DenseNetSpec};
use super::layers::Mode;
use super::optim::{build_optimizer, OptimizerKind};
use super::tensor::Tensor;
use super::NetError;
use crate::augment::{apply_pipeline, sample_rng, AugmentConfig};
use crate::volume::{
    extract_com_slices, Axis, Encoding, Exam, Normalization, SliceStack, MR_CHANNELS,
};

fn default_learning_rate() -> f64 {
    1e-3
}

fn default_batch_size() -> usize {
    80
}

fn default_epochs() -> usize {
    500
}

fn default_input_size() -> [usize; 2] {
    [64, 64]
}

/// One point of the hyperparameter space plus the fixed training constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: Arch,
    pub optimizer: OptimizerKind,
    pub normalization: Normalization,
    pub encoding: Encoding,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Network input `[height, width]` in pixels.
    #[serde(default = "default_input_size")]
    pub input_size: [usize; 2],
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Dense121,
            optimizer: OptimizerKind::Ranger21,
            normalization: Normalization::Percentile,
            encoding: Encoding::Brats,
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            seed: 0,
            input_size: default_input_size(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn in_channels(&self) -> usize {
        MR_CHANNELS + self.encoding.label_channels()
    }

    pub fn spec(&self) -> DenseNetSpec {
        DenseNetSpec::for_arch(self.arch, self.in_channels())
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.batch_size == 0 {
            return Err(NetError::InvalidConfig(
                "batch_size must be at least 1".into(),
            ));
        }
        if self.epochs == 0 {
            return Err(NetError::InvalidConfig("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(NetError::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        let [h, w] = self.input_size;
        if self.spec().final_hw(h, w).is_none() {
            return Err(NetError::InvalidConfig(format!(
                "input_size {h}x{w} collapses before the head; use at least 32x32"
            )));
        }
        self.augment.validate()?;
        Ok(())
    }

    /// Rejects stacks whose preprocessing differs from this configuration.
    pub fn check_stack(&self, stack: &SliceStack) -> Result<(), NetError> {
        if stack.encoding != self.encoding || stack.normalization != self.normalization {
            return Err(NetError::ConfigMismatch {
                expected: format!(
                    "{} encoding with {} normalization",
                    self.encoding, self.normalization
                ),
                found: format!(
                    "{} encoding with {} normalization",
                    stack.encoding, stack.normalization
                ),
            });
        }
        Ok(())
    }
}

/// A network input and its target (mean stars).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub stack: SliceStack,
    pub label: f64,
}

impl TrainSample {
    /// One sample per center-of-mass view of `exam`, all carrying `label`.
    pub fn views_of(
        exam: &Exam,
        encoding: Encoding,
        normalization: Normalization,
        label: f64,
    ) -> Vec<TrainSample> {
        Axis::ALL
            .iter()
            .map(|axis| TrainSample {
                stack: extract_com_slices(exam, *axis, encoding, normalization),
                label,
            })
            .collect()
    }
}

/// A trained (or freshly initialized) model with its configuration and loss history.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
    pub net: DenseNet<f32>,
}

impl Checkpoint {
    /// Raw (unclamped) network outputs in evaluation mode, one per stack.
    pub fn predict_raw(&self, stacks: &[SliceStack]) -> Result<Vec<f64>, NetError> {
        for s in stacks {
            self.config.check_stack(s)?;
        }
        let [h, w] = self.config.input_size;
        let mut net = self.net.clone();
        let mut out = Vec::with_capacity(stacks.len());
        for chunk in stacks.chunks(self.config.batch_size.max(1)) {
            let resized: Vec<SliceStack> = chunk.iter().map(|s| s.resized(h, w)).collect();
            let x = batch_tensor(resized.iter(), h, w, self.config.in_channels());
            out.extend(net.forward(&x, Mode::Eval).into_iter().map(|v| v as f64));
        }
        Ok(out)
    }
}

fn batch_tensor<'a>(
    stacks: impl ExactSizeIterator<Item = &'a SliceStack>,
    h: usize,
    w: usize,
    c: usize,
) -> Tensor<f32> {
    let n = stacks.len();
    let mut data = Vec::with_capacity(n * c * h * w);
    for s in stacks {
        debug_assert_eq!((s.height, s.width, s.channels()), (h, w, c));
        data.extend_from_slice(&s.data);
    }
    Tensor::from_vec(n, c, h, w, data)
}

/// Builds an untrained model with weights drawn from `config.seed`.
pub fn build_model(config: &TrainConfig) -> Result<Checkpoint, NetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let net = DenseNet::new(config.spec(), &mut rng)?;
    Ok(Checkpoint {
        format_version: FORMAT_VERSION,
        config: config.clone(),
        history: Vec::new(),
        net,
    })
}

/// Shuffled batch index lists; a trailing singleton joins the previous batch
/// because batch statistics need at least two samples.
fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").extend(last);
    }
    out
}

pub fn train(samples: &[TrainSample], config: &TrainConfig) -> Result<Checkpoint, NetError> {
    train_with_progress(samples, config, |_, _| {})
}

/// Minimizes the mean squared error for exactly `config.epochs` epochs and
/// returns the last-epoch model; `progress(epoch, mean_loss)` runs after each epoch.
pub fn train_with_progress(
    samples: &[TrainSample],
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<Checkpoint, NetError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(NetError::EmptyDataset);
    }
    for s in samples {
        if !(1.0..=6.0).contains(&s.label) {
            return Err(NetError::InvalidLabel(s.label));
        }
        config.check_stack(&s.stack)?;
    }
    let [h, w] = config.input_size;
    let c = config.in_channels();
    let stacks: Vec<SliceStack> = samples.iter().map(|s| s.stack.resized(h, w)).collect();
    let labels: Vec<f32> = samples.iter().map(|s| s.label as f32).collect();

    let mut ckpt = build_model(config)?;
    let mean_label = labels.iter().map(|v| *v as f64).sum::<f64>() / labels.len() as f64;
    *ckpt.net.head_bias_mut() = mean_label as f32;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let per_epoch = batches(&order, config.batch_size).len();
    let mut optimizer = build_optimizer::<f32>(
        config.optimizer,
        config.learning_rate,
        per_epoch * config.epochs,
    );
    let aug_seed = config.augment.seed ^ config.seed;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (bi, batch) in batches(&order, config.batch_size).into_iter().enumerate() {
            let augmented: Vec<SliceStack> = batch
                .par_iter()
                .map(|&i| {
                    let mut r = sample_rng(aug_seed, epoch as u64, i as u64);
                    apply_pipeline(&stacks[i], &config.augment, &mut r)
                })
                .collect::<Result<_, _>>()?;
            let x = batch_tensor(augmented.iter(), h, w, c);
            let y = ckpt.net.forward(&x, Mode::Train);
            let n = batch.len() as f32;
            let mut batch_loss = 0.0f64;
            let dout: Vec<f32> = y
                .iter()
                .zip(&batch)
                .map(|(p, &i)| {
                    let d = p - labels[i];
                    batch_loss += (d as f64) * (d as f64);
                    2.0 * d / n
                })
                .collect();
            if !batch_loss.is_finite() {
                return Err(NetError::NonFiniteLoss { epoch, batch: bi });
            }
            loss_sum += batch_loss;
            ckpt.net.backward(&dout);
            optimizer.step(&mut ckpt.net.params_mut());
            ckpt.net.zero_grad();
        }
        let mean = loss_sum / samples.len() as f64;
        ckpt.history.push(mean);
        progress(epoch, mean);
    }
    Ok(ckpt)
}
