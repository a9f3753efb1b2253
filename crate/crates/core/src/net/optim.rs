//! Optimizers behind a common stepping interface.
//!
//! State vectors are indexed by parameter position, so callers must pass
//! parameters in the same order on every step (as [`super::DenseNet::params_mut`] does).

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use super::tensor::Param;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Ranger21,
    Adamw,
    SgdMomentum,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 3] = [
        OptimizerKind::Ranger21,
        OptimizerKind::Adamw,
        OptimizerKind::SgdMomentum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Ranger21 => "ranger21",
            OptimizerKind::Adamw => "adamw",
            OptimizerKind::SgdMomentum => "sgd_momentum",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub trait Optimizer<F: Scalar>: Send {
    /// Applies one update using the gradients currently stored in `params`.
    fn step(&mut self, params: &mut [&mut Param<F>]);

    /// Learning rate used by the most recent step.
    fn current_lr(&self) -> f64;
}

/// Builds the optimizer for `kind`; `total_steps` drives Ranger21's warmup and warmdown.
pub fn build_optimizer<F: Scalar>(
    kind: OptimizerKind,
    lr: f64,
    total_steps: usize,
) -> Box<dyn Optimizer<F>> {
    match kind {
        OptimizerKind::Ranger21 => Box::new(Ranger21::new(lr, total_steps)),
        OptimizerKind::Adamw => Box::new(AdamW::new(lr)),
        OptimizerKind::SgdMomentum => Box::new(SgdMomentum::new(lr, 0.95)),
    }
}

/// Plain SGD with heavy-ball momentum (buffer seeded with the first gradient).
#[derive(Clone, Debug)]
pub struct SgdMomentum<F> {
    pub lr: f64,
    pub momentum: f64,
    buffers: Vec<Vec<F>>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            buffers: Vec::new(),
        }
    }
}

impl<F: Scalar> Optimizer<F> for SgdMomentum<F> {
    fn step(&mut self, params: &mut [&mut Param<F>]) {
        let first = self.buffers.is_empty();
        if first {
            self.buffers = params.iter().map(|p| p.grad.clone()).collect();
        }
        let (lr, mu) = (F::lit(self.lr), F::lit(self.momentum));
        for (p, buf) in params.iter_mut().zip(&mut self.buffers) {
            if !first {
                for (b, g) in buf.iter_mut().zip(&p.grad) {
                    *b = mu * *b + *g;
                }
            }
            for (v, b) in p.value.iter_mut().zip(buf.iter()) {
                *v = *v - lr * *b;
            }
        }
    }

    fn current_lr(&self) -> f64 {
        self.lr
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 1e-2,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl<F: Scalar> Optimizer<F> for AdamW<F> {
    fn step(&mut self, params: &mut [&mut Param<F>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let decay = F::lit(1.0 - self.lr * self.weight_decay);
        let step_size = F::lit(self.lr / bc1);
        let bc2_sqrt = F::lit(bc2.sqrt());
        let (b1f, b2f, eps) = (F::lit(b1), F::lit(b2), F::lit(self.eps));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1f * m[i] + (F::one() - b1f) * g;
                v[i] = b2f * v[i] + (F::one() - b2f) * g * g;
                let denom = v[i].sqrt() / bc2_sqrt + eps;
                p.value[i] = p.value[i] * decay - step_size * m[i] / denom;
            }
        }
    }

    fn current_lr(&self) -> f64 {
        self.lr
    }
}

/// Per-row L2 norms: whole-tensor norm for vectors, per-leading-index norm otherwise.
fn row_norms<F: Scalar>(values: &[F], shape: &[usize]) -> (Vec<f64>, usize) {
    let rows = if shape.len() <= 1 { 1 } else { shape[0].max(1) };
    let row_len = values.len() / rows;
    let norms = values
        .chunks(row_len.max(1))
        .map(|row| {
            row.iter()
                .map(|v| {
                    let x = v.to_f64().unwrap_or(0.0);
                    x * x
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    (norms, row_len.max(1))
}

fn softplus(x: f64, beta: f64) -> f64 {
    // same linear cut-over as the reference implementation
    if beta * x > 20.0 {
        x
    } else {
        (1.0 + (beta * x).exp()).ln() / beta
    }
}

/// Ranger21: AdamW core with adaptive gradient clipping, gradient
/// centralization, positive-negative momentum, AMS-style variance max,
/// softplus denominator, stable weight decay, norm loss, linear warmup,
/// linear warmdown and lookahead.
#[derive(Clone, Debug)]
pub struct Ranger21<F> {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub agc_clip: f64,
    pub agc_eps: f64,
    pub pnm_momentum: f64,
    pub softplus_beta: f64,
    pub normloss_factor: f64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    pub warmup_steps: usize,
    pub warmdown_start: usize,
    pub warmdown_steps: usize,
    pub warmdown_min_lr: f64,
    step: usize,
    lookahead_counter: usize,
    last_lr: f64,
    grad_ma: Vec<Vec<F>>,
    neg_grad_ma: Vec<Vec<F>>,
    variance_ma: Vec<Vec<F>>,
    max_variance_ma: Vec<Vec<F>>,
    slow: Vec<Vec<F>>,
}

impl<F: Scalar> Ranger21<F> {
    pub fn new(lr: f64, total_steps: usize) -> Self {
        let total = total_steps.max(1);
        let betas: (f64, f64) = (0.9, 0.999);
        // untuned linear warmup of 2 / (1 - beta2) steps, capped for short runs
        let beta_warmup = (2.0 / (1.0 - betas.1)).ceil() as usize;
        let warmup_steps = if beta_warmup as f64 / total as f64 > 0.45 {
            (0.22 * total as f64) as usize
        } else {
            beta_warmup
        };
        let warmdown_start = (0.72 * total as f64) as usize;
        Self {
            lr,
            betas,
            eps: 1e-8,
            weight_decay: 1e-4,
            agc_clip: 1e-2,
            agc_eps: 1e-3,
            pnm_momentum: 1.0,
            softplus_beta: 50.0,
            normloss_factor: 1e-4,
            lookahead_k: 5,
            lookahead_alpha: 0.5,
            warmup_steps,
            warmdown_start,
            warmdown_steps: total - warmdown_start,
            warmdown_min_lr: 3e-5,
            step: 0,
            lookahead_counter: 0,
            last_lr: 0.0,
            grad_ma: Vec::new(),
            neg_grad_ma: Vec::new(),
            variance_ma: Vec::new(),
            max_variance_ma: Vec::new(),
            slow: Vec::new(),
        }
    }

    /// Learning rate in effect at 1-based step `step`.
    pub fn scheduled_lr(&self, step: usize) -> f64 {
        let mut lr = self.lr;
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            lr *= (step as f64 / self.warmup_steps as f64).min(1.0);
        }
        if step >= self.warmdown_start {
            let iter = (step + 1).saturating_sub(self.warmdown_start).max(1);
            let pct = (iter as f64 / (self.warmdown_steps + 1) as f64).min(1.0);
            lr = (self.lr - (self.lr - self.warmdown_min_lr) * pct).max(self.warmdown_min_lr);
        }
        lr
    }

    fn clip_adaptive(&self, p: &mut Param<F>) {
        let (pnorm, row_len) = row_norms(&p.value, &p.shape);
        let (gnorm, _) = row_norms(&p.grad, &p.shape);
        for (r, grad_row) in p.grad.chunks_mut(row_len).enumerate() {
            let max_norm = pnorm[r].max(self.agc_eps) * self.agc_clip;
            if gnorm[r] > max_norm {
                let scale = F::lit(max_norm / gnorm[r].max(1e-6));
                grad_row.iter_mut().for_each(|g| *g = *g * scale);
            }
        }
    }

    fn centralize(p: &mut Param<F>) {
        if p.shape.len() <= 1 {
            return;
        }
        let row_len = p.len() / p.shape[0].max(1);
        for row in p.grad.chunks_mut(row_len.max(1)) {
            let mean =
                row.iter().map(|g| g.to_f64().unwrap_or(0.0)).sum::<f64>() / row.len() as f64;
            let mean = F::lit(mean);
            row.iter_mut().for_each(|g| *g = *g - mean);
        }
    }
}

impl<F: Scalar> Optimizer<F> for Ranger21<F> {
    fn step(&mut self, params: &mut [&mut Param<F>]) {
        if self.grad_ma.is_empty() {
            let zeros: Vec<Vec<F>> = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
            self.grad_ma = zeros.clone();
            self.neg_grad_ma = zeros.clone();
            self.variance_ma = zeros.clone();
            self.max_variance_ma = zeros;
            self.slow = params.iter().map(|p| p.value.clone()).collect();
        }
        self.step += 1;
        let step = self.step;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(step as i32);
        let bc2 = 1.0 - b2.powi(step as i32);

        // phase 1: clip, centralize, update the variance and gather its global scale
        let mut variance_sum = 0.0f64;
        let mut param_count = 0usize;
        let b2f = F::lit(b2);
        for (i, p) in params.iter_mut().enumerate() {
            self.clip_adaptive(p);
            Self::centralize(p);
            param_count += p.len();
            let var = &mut self.variance_ma[i];
            for (v, g) in var.iter_mut().zip(&p.grad) {
                *v = b2f * *v + (F::one() - b2f) * *g * *g;
                variance_sum += v.to_f64().unwrap_or(0.0) / bc2;
            }
        }
        let variance_normalized = (variance_sum / param_count.max(1) as f64).sqrt();

        // phase 2: norm loss, stable decay, positive-negative momentum step
        let lr = self.scheduled_lr(step);
        self.last_lr = lr;
        let noise_norm = ((1.0 + self.pnm_momentum).powi(2) + self.pnm_momentum.powi(2)).sqrt();
        let step_size = lr / bc1;
        let bc2_sqrt = bc2.sqrt();
        let b1sq = F::lit(b1 * b1);
        let pos = F::lit((1.0 + self.pnm_momentum) / noise_norm);
        let neg = F::lit(self.pnm_momentum / noise_norm);
        let decay = if self.weight_decay > 0.0 && variance_normalized > 0.0 {
            F::lit(1.0 - self.weight_decay * lr / variance_normalized)
        } else {
            F::one()
        };
        for (i, p) in params.iter_mut().enumerate() {
            let (unorm, row_len) = row_norms(&p.value, &p.shape);
            for (r, row) in p.value.chunks_mut(row_len).enumerate() {
                let correction = 2.0 * self.normloss_factor * (1.0 - 1.0 / (unorm[r] + self.eps));
                let scale = F::lit(1.0 - lr * correction);
                row.iter_mut().for_each(|v| *v = *v * scale);
            }
            p.value.iter_mut().for_each(|v| *v = *v * decay);

            let (ma, neg_ma) = if step % 2 == 1 {
                (&mut self.grad_ma[i], &self.neg_grad_ma[i])
            } else {
                (&mut self.neg_grad_ma[i], &self.grad_ma[i])
            };
            let var = &self.variance_ma[i];
            let max_var = &mut self.max_variance_ma[i];
            for j in 0..p.value.len() {
                ma[j] = b1sq * ma[j] + (F::one() - b1sq) * p.grad[j];
                if var[j] > max_var[j] {
                    max_var[j] = var[j];
                }
                let denom_raw = max_var[j].to_f64().unwrap_or(0.0).sqrt() / bc2_sqrt + self.eps;
                let denom = softplus(denom_raw, self.softplus_beta);
                let momentum = pos * ma[j] - neg * neg_ma[j];
                p.value[j] = p.value[j] - F::lit(step_size / denom) * momentum;
            }
        }

        self.lookahead_counter += 1;
        if self.lookahead_counter >= self.lookahead_k {
            self.lookahead_counter = 0;
            let alpha = F::lit(self.lookahead_alpha);
            for (p, slow) in params.iter_mut().zip(&mut self.slow) {
                for (v, s) in p.value.iter_mut().zip(slow.iter_mut()) {
                    *v = alpha * *v + (F::one() - alpha) * *s;
                    *s = *v;
                }
            }
        }
    }

    fn current_lr(&self) -> f64 {
        self.last_lr
    }
}
