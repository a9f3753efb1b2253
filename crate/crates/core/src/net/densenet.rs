//! Densely connected convolutional regressor.
//!
//! Layout follows the usual DenseNet-BC recipe: a 7x7/2 stem with 3x3/2 max
//! pooling, dense blocks of BN-ReLU-Conv1x1-BN-ReLU-Conv3x3 layers whose
//! outputs are concatenated onto a shared feature buffer, compressing
//! transitions (BN-ReLU-Conv1x1-AvgPool2), and a BN-ReLU + global average
//! pool + linear head producing one unbounded scalar.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool2_backward, avg_pool2_forward, window_out, BnRelu, Conv2d, MaxPool, Mode,
    RegressionHead,
};
use super::scalar::Scalar;
use super::tensor::{Param, Tensor};
use super::NetError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Dense121,
    Dense201,
}

impl Arch {
    pub const ALL: [Arch; 2] = [Arch::Dense121, Arch::Dense201];

    pub fn block_config(self) -> &'static [usize] {
        match self {
            Arch::Dense121 => &[6, 12, 24, 16],
            Arch::Dense201 => &[6, 12, 48, 32],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Dense121 => "dense121",
            Arch::Dense201 => "dense201",
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Topology of a dense network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DenseNetSpec {
    pub in_channels: usize,
    pub init_features: usize,
    pub growth: usize,
    pub bn_size: usize,
    pub blocks: Vec<usize>,
}

impl DenseNetSpec {
    pub fn for_arch(arch: Arch, in_channels: usize) -> Self {
        Self {
            in_channels,
            init_features: 64,
            growth: 32,
            bn_size: 4,
            blocks: arch.block_config().to_vec(),
        }
    }

    /// Minimal two-block variant used for gradient checks.
    pub fn tiny(in_channels: usize) -> Self {
        Self {
            in_channels,
            init_features: 4,
            growth: 3,
            bn_size: 2,
            blocks: vec![2, 1],
        }
    }

    /// Spatial extent entering the head, or `None` if some stage collapses.
    pub fn final_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let mut hw = (window_out(h, 7, 2, 3)?, window_out(w, 7, 2, 3)?);
        hw = MaxPool::<f32>::out_hw(hw.0, hw.1)?;
        for _ in 1..self.blocks.len() {
            hw = (hw.0 / 2, hw.1 / 2);
            if hw.0 == 0 || hw.1 == 0 {
                return None;
            }
        }
        Some(hw)
    }
}

#[derive(Clone, Debug)]
struct DenseLayer<F> {
    in_ch: usize,
    norm1: BnRelu<F>,
    conv1: Conv2d<F>,
    norm2: BnRelu<F>,
    conv2: Conv2d<F>,
}

impl<F: Scalar> DenseLayer<F> {
    fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        growth: usize,
        bn_size: usize,
        rng: &mut R,
    ) -> Self {
        let mid = bn_size * growth;
        Self {
            in_ch,
            norm1: BnRelu::new(&format!("{name}.norm1"), in_ch),
            conv1: Conv2d::new(&format!("{name}.conv1"), in_ch, mid, 1, 1, 0, rng),
            norm2: BnRelu::new(&format!("{name}.norm2"), mid),
            conv2: Conv2d::new(&format!("{name}.conv2"), mid, growth, 3, 1, 1, rng),
        }
    }

    fn forward(&mut self, features: &Tensor<F>, mode: Mode) -> Tensor<F> {
        let a = self.norm1.forward(features, mode);
        let b = self.conv1.forward(a, mode);
        let c = self.norm2.forward(&b, mode);
        self.conv2.forward(c, mode)
    }

    fn backward(&mut self, dnew: &Tensor<F>) -> Tensor<F> {
        let dc = self.conv2.backward(dnew, true).expect("input grad");
        let db = self.norm2.backward(&dc);
        let da = self.conv1.backward(&db, true).expect("input grad");
        self.norm1.backward(&da)
    }

    fn state<'a>(&'a self, out: &mut Vec<&'a Param<F>>) {
        bn_state(&self.norm1, out);
        out.push(&self.conv1.weight);
        bn_state(&self.norm2, out);
        out.push(&self.conv2.weight);
    }

    fn state_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Param<F>>) {
        bn_state_mut(&mut self.norm1, out);
        out.push(&mut self.conv1.weight);
        bn_state_mut(&mut self.norm2, out);
        out.push(&mut self.conv2.weight);
    }
}

#[derive(Clone, Debug)]
struct DenseBlock<F> {
    in_ch: usize,
    out_ch: usize,
    growth: usize,
    layers: Vec<DenseLayer<F>>,
}

impl<F: Scalar> DenseBlock<F> {
    fn forward(&mut self, x: Tensor<F>, mode: Mode) -> Tensor<F> {
        let mut features = Tensor::zeros(x.n, self.out_ch, x.h, x.w);
        features.write_channels(0, &x);
        for layer in &mut self.layers {
            let new = layer.forward(&features, mode);
            features.write_channels(layer.in_ch, &new);
        }
        features
    }

    fn backward(&mut self, mut grad: Tensor<F>) -> Tensor<F> {
        for layer in self.layers.iter_mut().rev() {
            let dnew = grad.channel_range(layer.in_ch, self.growth);
            let dprefix = layer.backward(&dnew);
            grad.add_channels(0, &dprefix);
        }
        grad.channel_prefix(self.in_ch)
    }
}

#[derive(Clone, Debug)]
struct Transition<F> {
    norm: BnRelu<F>,
    conv: Conv2d<F>,
    pre_pool_hw: (usize, usize),
}

impl<F: Scalar> Transition<F> {
    fn forward(&mut self, x: Tensor<F>, mode: Mode) -> Tensor<F> {
        let a = self.norm.forward(&x, mode);
        let b = self.conv.forward(a, mode);
        self.pre_pool_hw = (b.h, b.w);
        avg_pool2_forward(&b)
    }

    fn backward(&mut self, d: Tensor<F>) -> Tensor<F> {
        let (h, w) = self.pre_pool_hw;
        let db = avg_pool2_backward(&d, h, w);
        let da = self.conv.backward(&db, true).expect("input grad");
        self.norm.backward(&da)
    }
}

fn bn_state<'a, F: Scalar>(bn: &'a BnRelu<F>, out: &mut Vec<&'a Param<F>>) {
    out.push(&bn.gamma);
    out.push(&bn.beta);
    out.push(&bn.running_mean);
    out.push(&bn.running_var);
}

fn bn_state_mut<'a, F: Scalar>(bn: &'a mut BnRelu<F>, out: &mut Vec<&'a mut Param<F>>) {
    out.push(&mut bn.gamma);
    out.push(&mut bn.beta);
    out.push(&mut bn.running_mean);
    out.push(&mut bn.running_var);
}

/// DenseNet regressor mapping an NCHW batch to one scalar per sample.
#[derive(Clone, Debug)]
pub struct DenseNet<F> {
    spec: DenseNetSpec,
    stem_conv: Conv2d<F>,
    stem_norm: BnRelu<F>,
    stem_pool: MaxPool<F>,
    blocks: Vec<DenseBlock<F>>,
    transitions: Vec<Transition<F>>,
    final_norm: BnRelu<F>,
    head: RegressionHead<F>,
}

impl<F: Scalar> DenseNet<F> {
    pub fn new<R: Rng + ?Sized>(spec: DenseNetSpec, rng: &mut R) -> Result<Self, NetError> {
        if spec.in_channels == 0 || spec.growth == 0 || spec.bn_size == 0 || spec.blocks.is_empty()
        {
            return Err(NetError::InvalidConfig(format!(
                "degenerate dense network topology {spec:?}"
            )));
        }
        if spec.blocks.contains(&0) {
            return Err(NetError::InvalidConfig(
                "dense block with zero layers".into(),
            ));
        }
        let stem_conv = Conv2d::new(
            "features.conv0",
            spec.in_channels,
            spec.init_features,
            7,
            2,
            3,
            rng,
        );
        let stem_norm = BnRelu::new("features.norm0", spec.init_features);
        let mut channels = spec.init_features;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        let mut transitions = Vec::with_capacity(spec.blocks.len() - 1);
        for (bi, &depth) in spec.blocks.iter().enumerate() {
            let in_ch = channels;
            let layers = (0..depth)
                .map(|li| {
                    DenseLayer::new(
                        &format!("features.denseblock{}.denselayer{}", bi + 1, li + 1),
                        in_ch + li * spec.growth,
                        spec.growth,
                        spec.bn_size,
                        rng,
                    )
                })
                .collect();
            channels = in_ch + depth * spec.growth;
            blocks.push(DenseBlock {
                in_ch,
                out_ch: channels,
                growth: spec.growth,
                layers,
            });
            if bi + 1 < spec.blocks.len() {
                let name = format!("features.transition{}", bi + 1);
                let out = channels / 2;
                transitions.push(Transition {
                    norm: BnRelu::new(&format!("{name}.norm"), channels),
                    conv: Conv2d::new(&format!("{name}.conv"), channels, out, 1, 1, 0, rng),
                    pre_pool_hw: (0, 0),
                });
                channels = out;
            }
        }
        let final_norm = BnRelu::new("features.norm5", channels);
        let head = RegressionHead::new("classifier", channels, rng);
        Ok(Self {
            spec,
            stem_conv,
            stem_norm,
            stem_pool: MaxPool::new(),
            blocks,
            transitions,
            final_norm,
            head,
        })
    }

    pub fn spec(&self) -> &DenseNetSpec {
        &self.spec
    }

    pub fn in_channels(&self) -> usize {
        self.spec.in_channels
    }

    pub fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Vec<F> {
        assert_eq!(x.c, self.spec.in_channels, "input channel mismatch");
        let t = self.stem_conv.forward(x.clone(), mode);
        let t = self.stem_norm.forward(&t, mode);
        let mut t = self.stem_pool.forward(&t, mode);
        let last = self.blocks.len() - 1;
        for i in 0..self.blocks.len() {
            t = self.blocks[i].forward(t, mode);
            if i < last {
                t = self.transitions[i].forward(t, mode);
            }
        }
        let t = self.final_norm.forward(&t, mode);
        self.head.forward(&t, mode)
    }

    /// Back-propagates `dloss/doutput`, accumulating into parameter gradients.
    pub fn backward(&mut self, dout: &[F]) {
        let d = self.head.backward(dout);
        let mut d = self.final_norm.backward(&d);
        for i in (0..self.blocks.len()).rev() {
            if i < self.transitions.len() {
                d = self.transitions[i].backward(d);
            }
            d = self.blocks[i].backward(d);
        }
        let d = self.stem_pool.backward(&d);
        let d = self.stem_norm.backward(&d);
        let _ = self.stem_conv.backward(&d, false);
    }

    /// All named state (parameters and running statistics) in a fixed order.
    pub fn state(&self) -> Vec<&Param<F>> {
        let mut out = vec![&self.stem_conv.weight];
        bn_state(&self.stem_norm, &mut out);
        for (i, block) in self.blocks.iter().enumerate() {
            for layer in &block.layers {
                layer.state(&mut out);
            }
            if let Some(t) = self.transitions.get(i) {
                bn_state(&t.norm, &mut out);
                out.push(&t.conv.weight);
            }
        }
        bn_state(&self.final_norm, &mut out);
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn state_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut out = vec![&mut self.stem_conv.weight];
        bn_state_mut(&mut self.stem_norm, &mut out);
        let transitions = &mut self.transitions;
        let mut trans_iter = transitions.iter_mut();
        for block in self.blocks.iter_mut() {
            for layer in block.layers.iter_mut() {
                layer.state_mut(&mut out);
            }
            if let Some(t) = trans_iter.next() {
                bn_state_mut(&mut t.norm, &mut out);
                out.push(&mut t.conv.weight);
            }
        }
        bn_state_mut(&mut self.final_norm, &mut out);
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Trainable parameters only, in the same order as [`DenseNet::state`].
    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        self.state_mut()
            .into_iter()
            .filter(|p| p.trainable)
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.state()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.len())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn head_bias_mut(&mut self) -> &mut F {
        &mut self.head.bias.value[0]
    }
}
