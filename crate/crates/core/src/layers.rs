// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inference-mode convolutional layers with input-gradient backward passes.
//!
//! Weights are frozen everywhere in this crate, so each layer only
//! propagates gradients to its input; parameter gradients are never formed.

use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// 2-D convolution with square kernels, zero padding, stride and dilation.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    /// `[out, in, k, k]`, row-major.
    pub weight: Vec<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        weight: Vec<T>,
    ) -> Self {
        assert_eq!(weight.len(), out_channels * in_channels * kernel * kernel, "conv weight size");
        assert!(stride >= 1 && kernel >= 1);
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            dilation: 1,
            weight,
            bias: None,
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self::new(
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            vec![T::zero(); out_channels * in_channels * kernel * kernel],
        )
    }

    pub fn with_bias(mut self, bias: Vec<T>) -> Self {
        assert_eq!(bias.len(), self.out_channels, "conv bias size");
        self.bias = Some(bias);
        self
    }

    pub fn with_dilation(mut self, dilation: usize) -> Self {
        assert!(dilation >= 1);
        self.dilation = dilation;
        self
    }

    #[inline]
    pub fn weight_at(&self, o: usize, i: usize, ky: usize, kx: usize) -> T {
        self.weight[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }

    #[inline]
    pub fn set_weight(&mut self, o: usize, i: usize, ky: usize, kx: usize, v: T) {
        let k = self.kernel;
        self.weight[((o * self.in_channels + i) * k + ky) * k + kx] = v;
    }

    #[inline]
    pub fn effective_kernel(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    pub fn output_extent(&self, input: usize) -> usize {
        let span = input + 2 * self.padding;
        let k = self.effective_kernel();
        if span < k {
            0
        } else {
            (span - k) / self.stride + 1
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [T]) {
        let k = self.kernel;
        let ohw = oh * ow;
        for ci in 0..self.in_channels {
            let plane = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * ohw..][..ohw];
                    let dy = (ky * self.dilation) as isize - self.padding as isize;
                    let dx = (kx * self.dilation) as isize - self.padding as isize;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + dy;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride) as isize + dx;
                            *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, oh: usize, ow: usize, out: &mut [T]) {
        let k = self.kernel;
        let ohw = oh * ow;
        for ci in 0..self.in_channels {
            let plane = &mut out[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * ohw..][..ohw];
                    let dy = (ky * self.dilation) as isize - self.padding as isize;
                    let dx = (kx * self.dilation) as isize - self.padding as isize;
                    for oy in 0..oh {
                        let iy = (oy * self.stride) as isize + dy;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, &g) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * self.stride) as isize + dx;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] = dst[ix as usize] + g;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = (self.output_extent(h), self.output_extent(w));
        let ohw = oh * ow;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let mut out = Tensor::zeros([n, self.out_channels, oh, ow]);
        let mut cols = if self.is_pointwise() { Vec::new() } else { vec![T::zero(); kdim * ohw] };
        for b in 0..n {
            let dst = out.sample_mut(b);
            if self.is_pointwise() {
                matmul(&self.weight, false, x.sample(b), false, dst, self.out_channels, kdim, ohw);
            } else {
                self.im2col(x.sample(b), h, w, oh, ow, &mut cols);
                matmul(&self.weight, false, &cols, false, dst, self.out_channels, kdim, ohw);
            }
            if let Some(bias) = &self.bias {
                for (o, &bv) in bias.iter().enumerate() {
                    dst[o * ohw..(o + 1) * ohw].iter_mut().for_each(|v| *v = *v + bv);
                }
            }
        }
        out
    }

    /// Gradient with respect to the input, given the gradient of the output.
    pub fn backward_input(&self, grad_out: &Tensor<T>, input_shape: [usize; 4]) -> Tensor<T> {
        let [n, _, h, w] = input_shape;
        let [gn, gc, oh, ow] = grad_out.shape();
        assert_eq!((gn, gc), (n, self.out_channels), "conv grad shape");
        let ohw = oh * ow;
        let kdim = self.in_channels * self.kernel * self.kernel;
        let mut grad_in = Tensor::zeros(input_shape);
        let mut cols = vec![T::zero(); kdim * ohw];
        for b in 0..n {
            if self.is_pointwise() {
                matmul(&self.weight, true, grad_out.sample(b), false, grad_in.sample_mut(b), kdim, self.out_channels, ohw);
            } else {
                matmul(&self.weight, true, grad_out.sample(b), false, &mut cols, kdim, self.out_channels, ohw);
                self.col2im(&cols, h, w, oh, ow, grad_in.sample_mut(b));
            }
        }
        grad_in
    }
}

/// Batch normalization with frozen running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNorm<T> {
    /// Normalization that maps every channel to itself.
    pub fn identity(channels: usize) -> Self {
        let eps = T::lit(1e-5);
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one() - eps; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` such that `y = scale * x + shift`.
    pub fn affine(&self) -> Vec<(T, T)> {
        (0..self.channels())
            .map(|c| {
                let scale = self.gamma[c] / (self.running_var[c] + self.eps).sqrt();
                (scale, self.beta[c] - self.running_mean[c] * scale)
            })
            .collect()
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, _, _] = x.shape();
        assert_eq!(c, self.channels(), "batch norm channels");
        let affine = self.affine();
        let mut out = x.clone();
        for b in 0..n {
            for (ch, &(s, t)) in affine.iter().enumerate() {
                out.plane_mut(b, ch).iter_mut().for_each(|v| *v = *v * s + t);
            }
        }
        out
    }

    pub fn backward_input(&self, grad_out: &Tensor<T>) -> Tensor<T> {
        let affine = self.affine();
        let mut g = grad_out.clone();
        for b in 0..g.batch() {
            for (ch, &(s, _)) in affine.iter().enumerate() {
                g.plane_mut(b, ch).iter_mut().for_each(|v| *v = *v * s);
            }
        }
        g
    }
}

/// Max pooling with implicit negative-infinity padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl MaxPool2d {
    pub fn output_extent(&self, input: usize) -> usize {
        (input + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Returns the pooled tensor and, per output element, the flat in-plane
    /// index of the winning input (first maximum wins).
    pub fn forward_indexed<T: Scalar>(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
        let [n, c, h, w] = x.shape();
        let (oh, ow) = (self.output_extent(h), self.output_extent(w));
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut arg = vec![0usize; n * c * oh * ow];
        let mut idx = 0;
        for b in 0..n {
            for ch in 0..c {
                let plane = x.plane(b, ch);
                let dst = out.plane_mut(b, ch);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = usize::MAX;
                        for ky in 0..self.kernel {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..self.kernel {
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let i = iy as usize * w + ix as usize;
                                if best_i == usize::MAX || plane[i] > best || plane[i].is_nan() {
                                    best = plane[i];
                                    best_i = i;
                                }
                            }
                        }
                        dst[oy * ow + ox] = best;
                        arg[idx] = best_i;
                        idx += 1;
                    }
                }
            }
        }
        (out, arg)
    }

    pub fn backward_input<T: Scalar>(&self, grad_out: &Tensor<T>, argmax: &[usize], input_shape: [usize; 4]) -> Tensor<T> {
        let [n, c, _, _] = input_shape;
        let mut grad_in = Tensor::zeros(input_shape);
        let mut idx = 0;
        for b in 0..n {
            for ch in 0..c {
                let g = grad_out.plane(b, ch).to_vec();
                let dst = grad_in.plane_mut(b, ch);
                for gv in g {
                    let i = argmax[idx];
                    dst[i] = dst[i] + gv;
                    idx += 1;
                }
            }
        }
        grad_in
    }
}

/// Fully connected layer, `[out, in]` weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, weight: Vec<T>, bias: Vec<T>) -> Self {
        assert_eq!(weight.len(), in_features * out_features, "linear weight size");
        assert_eq!(bias.len(), out_features, "linear bias size");
        Self {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    /// `features` is `[batch, in_features]` flattened.
    pub fn forward(&self, features: &[T], batch: usize) -> Vec<T> {
        assert_eq!(features.len(), batch * self.in_features, "linear input size");
        let mut out = vec![T::zero(); batch * self.out_features];
        matmul(features, false, &self.weight, true, &mut out, batch, self.in_features, self.out_features);
        for row in out.chunks_mut(self.out_features) {
            row.iter_mut().zip(&self.bias).for_each(|(v, &b)| *v = *v + b);
        }
        out
    }
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient through a rectifier whose output was `activated`.
pub fn relu_backward<T: Scalar>(activated: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    activated.zip_map(grad_out, |a, g| if a > T::zero() { g } else { T::zero() })
}

/// One stage of a sequential path.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    MaxPool(MaxPool2d),
}

/// Per-layer state retained by [`Layer::forward_cached`] for the backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Shape([usize; 4]),
    Activated(Tensor<T>),
    Argmax(Vec<usize>, [usize; 4]),
    None,
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Layer::Conv(conv) => conv.forward(x),
            Layer::BatchNorm(bn) => bn.forward(x),
            Layer::Relu => relu(x),
            Layer::MaxPool(pool) => pool.forward_indexed(x).0,
        }
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> (Tensor<T>, LayerCache<T>) {
        match self {
            Layer::Conv(conv) => (conv.forward(x), LayerCache::Shape(x.shape())),
            Layer::BatchNorm(bn) => (bn.forward(x), LayerCache::None),
            Layer::Relu => {
                let y = relu(x);
                (y.clone(), LayerCache::Activated(y))
            }
            Layer::MaxPool(pool) => {
                let (y, arg) = pool.forward_indexed(x);
                (y, LayerCache::Argmax(arg, x.shape()))
            }
        }
    }

    pub fn backward(&self, cache: &LayerCache<T>, grad_out: &Tensor<T>) -> Tensor<T> {
        match (self, cache) {
            (Layer::Conv(conv), LayerCache::Shape(shape)) => conv.backward_input(grad_out, *shape),
            (Layer::BatchNorm(bn), LayerCache::None) => bn.backward_input(grad_out),
            (Layer::Relu, LayerCache::Activated(y)) => relu_backward(y, grad_out),
            (Layer::MaxPool(pool), LayerCache::Argmax(arg, shape)) => pool.backward_input(grad_out, arg, *shape),
            _ => panic!("layer cache does not belong to this layer"),
        }
    }

    /// `(effective kernel, stride, padding)` for receptive-field arithmetic.
    pub fn geometry(&self) -> Option<(usize, usize, usize)> {
        match self {
            Layer::Conv(c) => Some((c.effective_kernel(), c.stride, c.padding)),
            Layer::MaxPool(p) => Some((p.kernel, p.stride, p.padding)),
            Layer::BatchNorm(_) | Layer::Relu => None,
        }
    }

    pub fn output_channels(&self, input: usize) -> usize {
        match self {
            Layer::Conv(c) => c.out_channels,
            _ => input,
        }
    }
}

/// Runs a sequence of layers.
pub fn run_path<T: Scalar>(layers: &[Layer<T>], x: &Tensor<T>) -> Tensor<T> {
    let mut cur = x.clone();
    for layer in layers {
        cur = layer.forward(&cur);
    }
    cur
}

/// Runs a sequence of layers, retaining what the backward pass needs.
pub fn run_path_cached<T: Scalar>(layers: &[Layer<T>], x: &Tensor<T>) -> (Tensor<T>, Vec<LayerCache<T>>) {
    let mut cur = x.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (y, cache) = layer.forward_cached(&cur);
        caches.push(cache);
        cur = y;
    }
    (cur, caches)
}

pub fn backward_path<T: Scalar>(layers: &[Layer<T>], caches: &[LayerCache<T>], grad: &Tensor<T>) -> Tensor<T> {
    let mut g = grad.clone();
    for (layer, cache) in layers.iter().zip(caches).rev() {
        g = layer.backward(cache, &g);
    }
    g
}
