use super::scalar::Scalar;

/// Dense NCHW activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![F::zero(); n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length mismatch");
        Self { n, c, h, w, data }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, b: usize) -> &[F] {
        let len = self.sample_len();
        &self.data[b * len..(b + 1) * len]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [F] {
        let len = self.sample_len();
        &mut self.data[b * len..(b + 1) * len]
    }

    /// Copy of the first `channels` channels of every sample.
    pub fn channel_prefix(&self, channels: usize) -> Self {
        assert!(channels <= self.c);
        let plane = self.plane();
        let mut out = Self::zeros(self.n, channels, self.h, self.w);
        for b in 0..self.n {
            out.sample_mut(b)
                .copy_from_slice(&self.sample(b)[..channels * plane]);
        }
        out
    }

    /// Copy of channels `start..start + count` of every sample.
    pub fn channel_range(&self, start: usize, count: usize) -> Self {
        assert!(start + count <= self.c);
        let plane = self.plane();
        let mut out = Self::zeros(self.n, count, self.h, self.w);
        for b in 0..self.n {
            out.sample_mut(b)
                .copy_from_slice(&self.sample(b)[start * plane..(start + count) * plane]);
        }
        out
    }

    /// Writes `src` into channels `offset..offset + src.c` of `self`.
    pub fn write_channels(&mut self, offset: usize, src: &Self) {
        assert_eq!((self.n, self.h, self.w), (src.n, src.h, src.w));
        assert!(offset + src.c <= self.c);
        let plane = self.plane();
        for b in 0..self.n {
            let dst = &mut self.sample_mut(b)[offset * plane..(offset + src.c) * plane];
            dst.copy_from_slice(src.sample(b));
        }
    }

    /// Adds `src` into channels `offset..offset + src.c` of `self`.
    pub fn add_channels(&mut self, offset: usize, src: &Self) {
        assert_eq!((self.n, self.h, self.w), (src.n, src.h, src.w));
        assert!(offset + src.c <= self.c);
        let plane = self.plane();
        for b in 0..self.n {
            let dst = &mut self.sample_mut(b)[offset * plane..(offset + src.c) * plane];
            for (d, s) in dst.iter_mut().zip(src.sample(b)) {
                *d = *d + *s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named, shaped block of model state.
///
/// Trainable parameters carry a gradient buffer of the same length;
/// running statistics are stored as non-trainable entries with no gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub trainable: bool,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![F::zero(); value.len()];
        Self {
            name: name.into(),
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(name: impl Into<String>, shape: Vec<usize>, value: Vec<F>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        Self {
            name: name.into(),
            shape,
            value,
            grad: Vec::new(),
            trainable: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}
