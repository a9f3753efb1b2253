//! Building blocks with hand-written backward passes.
//!
//! Every layer caches what its backward pass needs during a `Mode::Train`
//! forward call; `Mode::Eval` forward calls cache nothing.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use super::scalar::Scalar;
use super::tensor::{Param, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Output extent of a sliding window, `None` when the window does not fit.
pub fn window_out(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || len == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Bias-free 2D convolution, lowered to a single GEMM per batch.
#[derive(Clone, Debug)]
pub struct Conv2d<F> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<F>,
    input: Option<Tensor<F>>,
}

impl<F: Scalar> Conv2d<F> {
    /// Kaiming-normal initialised convolution (fan-in, ReLU gain).
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let value = (0..out_ch * fan_in)
            .map(|_| F::lit(normal.sample(rng)))
            .collect();
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight: Param::new(
                format!("{name}.weight"),
                vec![out_ch, in_ch, kernel, kernel],
                value,
            ),
            input: None,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            window_out(h, self.kernel, self.stride, self.pad)?,
            window_out(w, self.kernel, self.stride, self.pad)?,
        ))
    }

    fn rows(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// Lays the receptive fields of the whole batch out as a `rows x (n * ho * wo)` matrix.
    fn im2col(&self, x: &Tensor<F>, ho: usize, wo: usize) -> Vec<F> {
        let k = self.kernel;
        let plane_out = ho * wo;
        let ncols = x.n * plane_out;
        let mut cols = vec![F::zero(); self.rows() * ncols];
        let (h, w) = (x.h, x.w);
        let pointwise = k == 1 && self.stride == 1 && self.pad == 0;
        for b in 0..x.n {
            let xs = x.sample(b);
            for ci in 0..self.in_ch {
                let plane = &xs[ci * h * w..(ci + 1) * h * w];
                if pointwise {
                    let start = ci * ncols + b * plane_out;
                    cols[start..start + plane_out].copy_from_slice(plane);
                    continue;
                }
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let start = row * ncols + b * plane_out;
                        let dst = &mut cols[start..start + plane_out];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                            let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[F], n: usize, h: usize, w: usize, ho: usize, wo: usize) -> Tensor<F> {
        let k = self.kernel;
        let plane_out = ho * wo;
        let ncols = n * plane_out;
        let mut dx = Tensor::zeros(n, self.in_ch, h, w);
        for b in 0..n {
            let xs = dx.sample_mut(b);
            for ci in 0..self.in_ch {
                let plane = &mut xs[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ci * k + ky) * k + kx;
                        let start = row * ncols + b * plane_out;
                        let src = &cols[start..start + plane_out];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    let d = &mut dst_row[ix as usize];
                                    *d = *d + src[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&mut self, x: Tensor<F>, mode: Mode) -> Tensor<F> {
        assert_eq!(x.c, self.in_ch, "{}: channel mismatch", self.weight.name);
        let (ho, wo) = self
            .out_hw(x.h, x.w)
            .unwrap_or_else(|| panic!("{}: input too small", self.weight.name));
        let rows = self.rows();
        let plane_out = ho * wo;
        let ncols = x.n * plane_out;
        let cols = self.im2col(&x, ho, wo);
        let mut gathered = vec![F::zero(); self.out_ch * ncols];
        F::gemm(
            self.out_ch,
            rows,
            ncols,
            &self.weight.value,
            (rows, 1),
            &cols,
            (ncols, 1),
            F::zero(),
            &mut gathered,
            (ncols, 1),
        );
        let mut out = Tensor::zeros(x.n, self.out_ch, ho, wo);
        for b in 0..x.n {
            let os = out.sample_mut(b);
            for o in 0..self.out_ch {
                let src = &gathered[o * ncols + b * plane_out..o * ncols + (b + 1) * plane_out];
                os[o * plane_out..(o + 1) * plane_out].copy_from_slice(src);
            }
        }
        if mode == Mode::Train {
            self.input = Some(x);
        }
        out
    }

    /// Accumulates the weight gradient; returns the input gradient when asked.
    pub fn backward(&mut self, dout: &Tensor<F>, need_input_grad: bool) -> Option<Tensor<F>> {
        let x = self
            .input
            .take()
            .expect("Conv2d::backward called without a training forward pass");
        let (ho, wo) = (dout.h, dout.w);
        let rows = self.rows();
        let plane_out = ho * wo;
        let ncols = x.n * plane_out;
        let mut gathered = vec![F::zero(); self.out_ch * ncols];
        for b in 0..x.n {
            let ds = dout.sample(b);
            for o in 0..self.out_ch {
                gathered[o * ncols + b * plane_out..o * ncols + (b + 1) * plane_out]
                    .copy_from_slice(&ds[o * plane_out..(o + 1) * plane_out]);
            }
        }
        let cols = self.im2col(&x, ho, wo);
        F::gemm(
            self.out_ch,
            ncols,
            rows,
            &gathered,
            (ncols, 1),
            &cols,
            (1, ncols),
            F::one(),
            &mut self.weight.grad,
            (rows, 1),
        );
        if !need_input_grad {
            return None;
        }
        let mut dcols = cols;
        F::gemm(
            rows,
            self.out_ch,
            ncols,
            &self.weight.value,
            (1, rows),
            &gathered,
            (ncols, 1),
            F::zero(),
            &mut dcols,
            (ncols, 1),
        );
        Some(self.col2im(&dcols, x.n, x.h, x.w, ho, wo))
    }
}

#[derive(Clone, Debug)]
struct BnCache<F> {
    xhat: Tensor<F>,
    inv_std: Vec<F>,
}

/// Batch normalisation fused with a ReLU.
///
/// Reads only the first `channels` channels of its input, which lets dense
/// layers consume a prefix of the block's shared feature buffer.
#[derive(Clone, Debug)]
pub struct BnRelu<F> {
    pub channels: usize,
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Param<F>,
    pub running_var: Param<F>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache<F>>,
}

impl<F: Scalar> BnRelu<F> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            channels,
            gamma: Param::new(
                format!("{name}.weight"),
                vec![channels],
                vec![F::one(); channels],
            ),
            beta: Param::new(
                format!("{name}.bias"),
                vec![channels],
                vec![F::zero(); channels],
            ),
            running_mean: Param::buffer(
                format!("{name}.running_mean"),
                vec![channels],
                vec![F::zero(); channels],
            ),
            running_var: Param::buffer(
                format!("{name}.running_var"),
                vec![channels],
                vec![F::one(); channels],
            ),
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Tensor<F> {
        assert!(
            x.c >= self.channels,
            "{}: too few channels",
            self.gamma.name
        );
        let plane = x.plane();
        let count = x.n * plane;
        let mut out = Tensor::zeros(x.n, self.channels, x.h, x.w);
        let eps = F::lit(self.eps);
        match mode {
            Mode::Eval => {
                for c in 0..self.channels {
                    let inv = F::one() / (self.running_var.value[c] + eps).sqrt();
                    let scale = self.gamma.value[c] * inv;
                    let shift = self.beta.value[c] - self.running_mean.value[c] * scale;
                    for b in 0..x.n {
                        let src = &x.sample(b)[c * plane..(c + 1) * plane];
                        let dst = &mut out.sample_mut(b)[c * plane..(c + 1) * plane];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = (*s * scale + shift).max(F::zero());
                        }
                    }
                }
            }
            Mode::Train => {
                let mut xhat = Tensor::zeros(x.n, self.channels, x.h, x.w);
                let mut inv_std = vec![F::zero(); self.channels];
                let m = F::lit(self.momentum);
                for c in 0..self.channels {
                    let mut sum = 0.0f64;
                    for b in 0..x.n {
                        for v in &x.sample(b)[c * plane..(c + 1) * plane] {
                            sum += v.to_f64().unwrap_or(0.0);
                        }
                    }
                    let mean = sum / count as f64;
                    let mut sq = 0.0f64;
                    for b in 0..x.n {
                        for v in &x.sample(b)[c * plane..(c + 1) * plane] {
                            let d = v.to_f64().unwrap_or(0.0) - mean;
                            sq += d * d;
                        }
                    }
                    let var = sq / count as f64;
                    let inv = F::lit(1.0 / (var + self.eps).sqrt());
                    inv_std[c] = inv;
                    let mean_f = F::lit(mean);
                    let (g, bt) = (self.gamma.value[c], self.beta.value[c]);
                    for b in 0..x.n {
                        let src = &x.sample(b)[c * plane..(c + 1) * plane];
                        let off = c * plane;
                        for (i, s) in src.iter().enumerate() {
                            let xh = (*s - mean_f) * inv;
                            xhat.sample_mut(b)[off + i] = xh;
                            out.sample_mut(b)[off + i] = (g * xh + bt).max(F::zero());
                        }
                    }
                    let unbiased = if count > 1 {
                        var * count as f64 / (count - 1) as f64
                    } else {
                        var
                    };
                    let rm = &mut self.running_mean.value[c];
                    *rm = (F::one() - m) * *rm + m * mean_f;
                    let rv = &mut self.running_var.value[c];
                    *rv = (F::one() - m) * *rv + m * F::lit(unbiased);
                }
                self.cache = Some(BnCache { xhat, inv_std });
            }
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let BnCache { xhat, inv_std } = self
            .cache
            .take()
            .expect("BnRelu::backward called without a training forward pass");
        assert_eq!(dy.c, self.channels);
        let plane = dy.plane();
        let count = F::lit((dy.n * plane) as f64);
        let mut dx = Tensor::zeros(dy.n, self.channels, dy.h, dy.w);
        for c in 0..self.channels {
            let (g, bt) = (self.gamma.value[c], self.beta.value[c]);
            let mut sum_dy = F::zero();
            let mut sum_dy_xhat = F::zero();
            for b in 0..dy.n {
                let off = c * plane;
                let xs = &xhat.sample(b)[off..off + plane];
                let ds = &dy.sample(b)[off..off + plane];
                let dst = &mut dx.sample_mut(b)[off..off + plane];
                for i in 0..plane {
                    let gated = if g * xs[i] + bt > F::zero() {
                        ds[i]
                    } else {
                        F::zero()
                    };
                    dst[i] = gated;
                    sum_dy = sum_dy + gated;
                    sum_dy_xhat = sum_dy_xhat + gated * xs[i];
                }
            }
            self.gamma.grad[c] = self.gamma.grad[c] + sum_dy_xhat;
            self.beta.grad[c] = self.beta.grad[c] + sum_dy;
            let k = g * inv_std[c] / count;
            for b in 0..dy.n {
                let off = c * plane;
                let xs = &xhat.sample(b)[off..off + plane];
                let dst = &mut dx.sample_mut(b)[off..off + plane];
                for i in 0..plane {
                    dst[i] = k * (count * dst[i] - sum_dy - xs[i] * sum_dy_xhat);
                }
            }
        }
        dx
    }
}

/// 3x3 max pooling with stride 2 and padding 1.
#[derive(Clone, Debug, Default)]
pub struct MaxPool<F> {
    argmax: Option<(Vec<usize>, usize, usize, usize, usize)>,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Scalar> MaxPool<F> {
    pub const KERNEL: usize = 3;
    pub const STRIDE: usize = 2;
    pub const PAD: usize = 1;

    pub fn new() -> Self {
        Self {
            argmax: None,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn out_hw(h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            window_out(h, Self::KERNEL, Self::STRIDE, Self::PAD)?,
            window_out(w, Self::KERNEL, Self::STRIDE, Self::PAD)?,
        ))
    }

    pub fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Tensor<F> {
        let (ho, wo) = Self::out_hw(x.h, x.w).expect("max pool input too small");
        let mut out = Tensor::zeros(x.n, x.c, ho, wo);
        let mut idx = vec![0usize; out.data.len()];
        let (h, w) = (x.h, x.w);
        for b in 0..x.n {
            for c in 0..x.c {
                let src = &x.sample(b)[c * h * w..(c + 1) * h * w];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = F::neg_infinity();
                        let mut best_i = 0;
                        for ky in 0..Self::KERNEL {
                            let iy = (oy * Self::STRIDE + ky) as isize - Self::PAD as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..Self::KERNEL {
                                let ix = (ox * Self::STRIDE + kx) as isize - Self::PAD as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let i = iy as usize * w + ix as usize;
                                if src[i] > best {
                                    best = src[i];
                                    best_i = i;
                                }
                            }
                        }
                        let o = ((b * x.c + c) * ho + oy) * wo + ox;
                        out.data[o] = best;
                        idx[o] = best_i;
                    }
                }
            }
        }
        if mode == Mode::Train {
            self.argmax = Some((idx, x.n, x.c, h, w));
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor<F>) -> Tensor<F> {
        let (idx, n, c, h, w) = self
            .argmax
            .take()
            .expect("MaxPool::backward called without a training forward pass");
        let mut dx = Tensor::zeros(n, c, h, w);
        let plane_out = dy.plane();
        for (o, g) in dy.data.iter().enumerate() {
            let bc = o / plane_out;
            let d = &mut dx.data[bc * h * w + idx[o]];
            *d = *d + *g;
        }
        dx
    }
}

/// 2x2 average pooling with stride 2 (trailing odd row/column dropped).
pub fn avg_pool2_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let (ho, wo) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.n, x.c, ho, wo);
    let quarter = F::lit(0.25);
    for bc in 0..x.n * x.c {
        let src = &x.data[bc * x.h * x.w..(bc + 1) * x.h * x.w];
        let dst = &mut out.data[bc * ho * wo..(bc + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let i = 2 * oy * x.w + 2 * ox;
                dst[oy * wo + ox] =
                    (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<F: Scalar>(dy: &Tensor<F>, h: usize, w: usize) -> Tensor<F> {
    let mut dx = Tensor::zeros(dy.n, dy.c, h, w);
    let quarter = F::lit(0.25);
    let (ho, wo) = (dy.h, dy.w);
    for bc in 0..dy.n * dy.c {
        let src = &dy.data[bc * ho * wo..(bc + 1) * ho * wo];
        let dst = &mut dx.data[bc * h * w..(bc + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let g = src[oy * wo + ox] * quarter;
                let i = 2 * oy * w + 2 * ox;
                dst[i] = g;
                dst[i + 1] = g;
                dst[i + w] = g;
                dst[i + w + 1] = g;
            }
        }
    }
    dx
}

/// Global average pooling followed by a linear map to one scalar.
#[derive(Clone, Debug)]
pub struct RegressionHead<F> {
    pub in_features: usize,
    pub weight: Param<F>,
    pub bias: Param<F>,
    cache: Option<(Vec<F>, usize, usize, usize)>,
}

impl<F: Scalar> RegressionHead<F> {
    pub fn new<R: Rng + ?Sized>(name: &str, in_features: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("valid bounds");
        let weight = (0..in_features)
            .map(|_| F::lit(uniform.sample(rng)))
            .collect();
        Self {
            in_features,
            weight: Param::new(format!("{name}.weight"), vec![1, in_features], weight),
            bias: Param::new(format!("{name}.bias"), vec![1], vec![F::zero()]),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<F>, mode: Mode) -> Vec<F> {
        assert_eq!(x.c, self.in_features);
        let plane = x.plane();
        let inv = F::one() / F::lit(plane as f64);
        let mut pooled = vec![F::zero(); x.n * x.c];
        for b in 0..x.n {
            let s = x.sample(b);
            for c in 0..x.c {
                let sum = s[c * plane..(c + 1) * plane]
                    .iter()
                    .fold(F::zero(), |a, v| a + *v);
                pooled[b * x.c + c] = sum * inv;
            }
        }
        let out = (0..x.n)
            .map(|b| {
                pooled[b * x.c..(b + 1) * x.c]
                    .iter()
                    .zip(&self.weight.value)
                    .fold(self.bias.value[0], |a, (f, w)| a + *f * *w)
            })
            .collect();
        if mode == Mode::Train {
            self.cache = Some((pooled, x.n, x.h, x.w));
        }
        out
    }

    pub fn backward(&mut self, dout: &[F]) -> Tensor<F> {
        let (pooled, n, h, w) = self
            .cache
            .take()
            .expect("RegressionHead::backward called without a training forward pass");
        let c = self.in_features;
        let plane = h * w;
        let inv = F::one() / F::lit(plane as f64);
        let mut dx = Tensor::zeros(n, c, h, w);
        for b in 0..n {
            let g = dout[b];
            self.bias.grad[0] = self.bias.grad[0] + g;
            for ch in 0..c {
                self.weight.grad[ch] = self.weight.grad[ch] + g * pooled[b * c + ch];
                let d = g * self.weight.value[ch] * inv;
                dx.sample_mut(b)[ch * plane..(ch + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v = d);
            }
        }
        dx
    }
}
