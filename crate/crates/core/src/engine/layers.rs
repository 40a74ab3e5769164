//! Primitive layers: forward and reverse-mode passes over NHWC batches.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Scalar, Tensor};

/// Per-sample activation shape `(height, width, channels)`. Flat feature
/// vectors are `(1, 1, features)`.
pub type Shape = [usize; 3];

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Linear,
    Relu,
    /// `x * sigmoid(x)`.
    Swish,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Avg,
}

/// Weight-free description of a primitive layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { filters: usize, kernel: usize, stride: usize, padding: Padding, bias: bool },
    BatchNorm,
    Act(Activation),
    Pool { kind: PoolKind, kernel: usize, stride: usize, padding: Padding },
    Flatten,
    Dense { units: usize, bias: bool },
}

/// Role of a parameter tensor; only kernels are L2-regularized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Kernel,
    Bias,
    Gamma,
    Beta,
}

/// Output size and leading padding along one axis.
pub fn window_geometry(input: usize, kernel: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    if kernel == 0 || stride == 0 || input == 0 {
        return None;
    }
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => (input >= kernel).then(|| ((input - kernel) / stride + 1, 0)),
    }
}

impl LayerSpec {
    /// Output shape, or `None` when the geometry is impossible.
    pub fn output_shape(&self, s: Shape) -> Option<Shape> {
        match *self {
            LayerSpec::Conv { filters, kernel, stride, padding, .. } => {
                let (h, _) = window_geometry(s[0], kernel, stride, padding)?;
                let (w, _) = window_geometry(s[1], kernel, stride, padding)?;
                (filters > 0).then_some([h, w, filters])
            }
            LayerSpec::Pool { kernel, stride, padding, .. } => {
                let (h, _) = window_geometry(s[0], kernel, stride, padding)?;
                let (w, _) = window_geometry(s[1], kernel, stride, padding)?;
                Some([h, w, s[2]])
            }
            LayerSpec::BatchNorm | LayerSpec::Act(_) => Some(s),
            LayerSpec::Flatten => Some([1, 1, s[0] * s[1] * s[2]]),
            LayerSpec::Dense { units, .. } => (units > 0).then_some([1, 1, units]),
        }
    }
}

/// Whether batch-norm layers use batch statistics or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// Values a layer keeps from its forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    None,
    BatchStats { mean: Vec<f64>, var: Vec<f64>, count: usize },
    Argmax(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub in_shape: Shape,
    pub out_shape: Shape,
    /// Conv/Dense: `[kernel, bias?]`; BatchNorm: `[gamma, beta]`.
    pub params: Vec<Vec<T>>,
    /// BatchNorm running `[mean, variance]`.
    pub state: Vec<Vec<T>>,
}

impl<T: Scalar> Layer<T> {
    /// He-uniform kernels, zero biases, unit gamma and zero beta.
    pub fn new<R: Rng + ?Sized>(spec: LayerSpec, in_shape: Shape, rng: &mut R) -> Option<Self> {
        let out_shape = spec.output_shape(in_shape)?;
        let he = |fan_in: usize, n: usize, rng: &mut R| -> Vec<T> {
            let limit = libm::sqrt(6.0 / fan_in as f64);
            (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect()
        };
        let (params, state) = match spec {
            LayerSpec::Conv { filters, kernel, bias, .. } => {
                let fan_in = kernel * kernel * in_shape[2];
                let mut p = vec![he(fan_in, fan_in * filters, rng)];
                if bias {
                    p.push(vec![T::zero(); filters]);
                }
                (p, Vec::new())
            }
            LayerSpec::Dense { units, bias } => {
                let fan_in = in_shape.iter().product();
                let mut p = vec![he(fan_in, fan_in * units, rng)];
                if bias {
                    p.push(vec![T::zero(); units]);
                }
                (p, Vec::new())
            }
            LayerSpec::BatchNorm => {
                let c = in_shape[2];
                (vec![vec![T::one(); c], vec![T::zero(); c]], vec![vec![T::zero(); c], vec![T::one(); c]])
            }
            _ => (Vec::new(), Vec::new()),
        };
        Some(Layer { spec, in_shape, out_shape, params, state })
    }

    pub fn param_roles(&self) -> &'static [ParamRole] {
        match self.spec {
            LayerSpec::Conv { bias: true, .. } | LayerSpec::Dense { bias: true, .. } => {
                &[ParamRole::Kernel, ParamRole::Bias]
            }
            LayerSpec::Conv { .. } | LayerSpec::Dense { .. } => &[ParamRole::Kernel],
            LayerSpec::BatchNorm => &[ParamRole::Gamma, ParamRole::Beta],
            _ => &[],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Layer<U> {
        let conv = |v: &Vec<Vec<T>>| v.iter().map(|p| p.iter().map(|x| U::of(x.as_f64())).collect()).collect();
        Layer {
            spec: self.spec.clone(),
            in_shape: self.in_shape,
            out_shape: self.out_shape,
            params: conv(&self.params),
            state: conv(&self.state),
        }
    }

    fn out_tensor(&self, n: usize) -> Tensor<T> {
        let [h, w, c] = self.out_shape;
        Tensor::zeros(&[n, h, w, c])
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Cache) {
        let n = x.batch();
        debug_assert_eq!(x.sample_len(), self.in_shape.iter().product::<usize>());
        match self.spec {
            LayerSpec::Conv { kernel, stride, padding, .. } => {
                let mut y = self.out_tensor(n);
                conv_forward(self, x, &mut y, kernel, stride, padding);
                (y, Cache::None)
            }
            LayerSpec::Dense { units, .. } => {
                let mut y = self.out_tensor(n);
                let fan_in = x.sample_len();
                T::gemm(n, fan_in, units, x.data(), false, &self.params[0], false, y.data_mut(), false);
                if let Some(b) = self.params.get(1) {
                    for row in y.data_mut().chunks_mut(units) {
                        row.iter_mut().zip(b).for_each(|(v, &bi)| *v += bi);
                    }
                }
                (y, Cache::None)
            }
            LayerSpec::BatchNorm => bn_forward(self, x, mode),
            LayerSpec::Act(a) => (x.map(|v| activate(a, v)), Cache::None),
            LayerSpec::Pool { kind, kernel, stride, padding } => pool_forward(self, x, kind, kernel, stride, padding),
            LayerSpec::Flatten => {
                let y = x.clone().reshape(&[n, 1, 1, x.sample_len()]).expect("same length");
                (y, Cache::None)
            }
        }
    }

    /// Reverse pass. Parameter gradients are accumulated into `grads` (same
    /// layout as `params`) when given; the input gradient is returned when
    /// `need_dx` is set.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        cache: &Cache,
        dy: &Tensor<T>,
        grads: Option<&mut [Vec<T>]>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let n = x.batch();
        match self.spec {
            LayerSpec::Conv { kernel, stride, padding, .. } => {
                conv_backward(self, x, dy, grads, need_dx, kernel, stride, padding)
            }
            LayerSpec::Dense { units, .. } => {
                let fan_in = x.sample_len();
                if let Some(g) = grads {
                    T::gemm(fan_in, n, units, x.data(), true, dy.data(), false, &mut g[0], true);
                    if let Some(gb) = g.get_mut(1) {
                        for row in dy.data().chunks(units) {
                            gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                        }
                    }
                }
                need_dx.then(|| {
                    let mut dx = Tensor::zeros(x.shape());
                    T::gemm(n, units, fan_in, dy.data(), false, &self.params[0], true, dx.data_mut(), false);
                    dx
                })
            }
            LayerSpec::BatchNorm => bn_backward(self, x, cache, dy, grads, need_dx),
            LayerSpec::Act(a) => need_dx.then(|| {
                let data = x.data().iter().zip(dy.data()).map(|(&xv, &g)| g * activation_slope(a, xv)).collect();
                Tensor::from_vec(x.shape(), data).expect("same shape")
            }),
            LayerSpec::Pool { kind, kernel, stride, padding } => {
                need_dx.then(|| pool_backward(self, x, cache, dy, kind, kernel, stride, padding))
            }
            LayerSpec::Flatten => need_dx.then(|| dy.clone().reshape(x.shape()).expect("same length")),
        }
    }

    /// Folds the batch statistics of a training-mode pass into the running
    /// statistics (`running = m * running + (1 - m) * batch`, unbiased
    /// variance).
    pub fn commit_stats(&mut self, cache: &Cache) {
        if let (LayerSpec::BatchNorm, Cache::BatchStats { mean, var, count }) = (&self.spec, cache) {
            let unbias = if *count > 1 { *count as f64 / (*count as f64 - 1.0) } else { 1.0 };
            let m = BN_MOMENTUM;
            for c in 0..mean.len() {
                let rm = &mut self.state[0][c];
                *rm = T::of(m * rm.as_f64() + (1.0 - m) * mean[c]);
                let rv = &mut self.state[1][c];
                *rv = T::of(m * rv.as_f64() + (1.0 - m) * var[c] * unbias);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub fn activate<T: Scalar>(a: Activation, v: T) -> T {
    match a {
        Activation::Linear => v,
        Activation::Relu => {
            if v > T::zero() {
                v
            } else {
                T::zero()
            }
        }
        Activation::Swish => T::of(v.as_f64() * sigmoid(v.as_f64())),
        Activation::Sigmoid => T::of(sigmoid(v.as_f64())),
    }
}

/// Derivative of the activation at input `v`.
pub fn activation_slope<T: Scalar>(a: Activation, v: T) -> T {
    match a {
        Activation::Linear => T::one(),
        Activation::Relu => {
            if v > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        Activation::Swish => {
            let s = sigmoid(v.as_f64());
            T::of(s + v.as_f64() * s * (1.0 - s))
        }
        Activation::Sigmoid => {
            let s = sigmoid(v.as_f64());
            T::of(s * (1.0 - s))
        }
    }
}

struct Geometry {
    ih: usize,
    iw: usize,
    c: usize,
    oh: usize,
    ow: usize,
    pt: usize,
    pl: usize,
}

fn geometry(in_shape: Shape, out_shape: Shape, kernel: usize, stride: usize, padding: Padding) -> Geometry {
    let (oh, pt) = window_geometry(in_shape[0], kernel, stride, padding).expect("checked at construction");
    let (ow, pl) = window_geometry(in_shape[1], kernel, stride, padding).expect("checked at construction");
    debug_assert_eq!([oh, ow], [out_shape[0], out_shape[1]]);
    Geometry { ih: in_shape[0], iw: in_shape[1], c: in_shape[2], oh, ow, pt, pl }
}

/// Input row/column of kernel tap `k` for output position `o`, if inside.
#[inline]
fn tap(o: usize, k: usize, stride: usize, pad: usize, size: usize) -> Option<usize> {
    let p = (o * stride + k).checked_sub(pad)?;
    (p < size).then_some(p)
}

// Columns for one sample: row = output pixel, column = (ky, kx, ci).
fn im2col<T: Scalar>(g: &Geometry, kernel: usize, stride: usize, xs: &[T], cols: &mut [T]) {
    let kk = kernel * kernel * g.c;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &mut cols[(oy * g.ow + ox) * kk..(oy * g.ow + ox + 1) * kk];
            for ky in 0..kernel {
                let iy = tap(oy, ky, stride, g.pt, g.ih);
                for kx in 0..kernel {
                    let dst = &mut row[(ky * kernel + kx) * g.c..(ky * kernel + kx + 1) * g.c];
                    match (iy, tap(ox, kx, stride, g.pl, g.iw)) {
                        (Some(iy), Some(ix)) => {
                            let src = (iy * g.iw + ix) * g.c;
                            dst.copy_from_slice(&xs[src..src + g.c]);
                        }
                        _ => dst.iter_mut().for_each(|v| *v = T::zero()),
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &Geometry, kernel: usize, stride: usize, cols: &[T], dxs: &mut [T]) {
    let kk = kernel * kernel * g.c;
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let row = &cols[(oy * g.ow + ox) * kk..(oy * g.ow + ox + 1) * kk];
            for ky in 0..kernel {
                let Some(iy) = tap(oy, ky, stride, g.pt, g.ih) else { continue };
                for kx in 0..kernel {
                    let Some(ix) = tap(ox, kx, stride, g.pl, g.iw) else { continue };
                    let src = &row[(ky * kernel + kx) * g.c..(ky * kernel + kx + 1) * g.c];
                    let dst = &mut dxs[(iy * g.iw + ix) * g.c..(iy * g.iw + ix + 1) * g.c];
                    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                }
            }
        }
    }
}

fn is_pointwise(g: &Geometry, kernel: usize, stride: usize) -> bool {
    kernel == 1 && stride == 1 && g.pt == 0 && g.pl == 0
}

/// Samples per im2col group, keeping the column buffer near 4M elements.
fn group_size(n: usize, rows_per_sample: usize) -> usize {
    (COLS_LIMIT / rows_per_sample.max(1)).clamp(1, n.max(1))
}

const COLS_LIMIT: usize = 1 << 22;

fn conv_forward<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    y: &mut Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: Padding,
) {
    let g = geometry(layer.in_shape, layer.out_shape, kernel, stride, padding);
    let filters = layer.out_shape[2];
    let kk = kernel * kernel * g.c;
    let m = g.oh * g.ow;
    let (in_len, out_len) = (x.sample_len(), m * filters);
    let pointwise = is_pointwise(&g, kernel, stride);
    let group = group_size(x.batch(), m * kk);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); group * m * kk] };
    let mut i = 0;
    while i < x.batch() {
        let gn = group.min(x.batch() - i);
        let xs = &x.data()[i * in_len..(i + gn) * in_len];
        let a: &[T] = if pointwise {
            xs
        } else {
            for (s, col) in xs.chunks(in_len).zip(cols.chunks_mut(m * kk)) {
                im2col(&g, kernel, stride, s, col);
            }
            &cols[..gn * m * kk]
        };
        let ys = &mut y.data_mut()[i * out_len..(i + gn) * out_len];
        T::gemm(gn * m, kk, filters, a, false, &layer.params[0], false, ys, false);
        if let Some(b) = layer.params.get(1) {
            for row in ys.chunks_mut(filters) {
                row.iter_mut().zip(b).for_each(|(v, &bi)| *v += bi);
            }
        }
        i += gn;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    mut grads: Option<&mut [Vec<T>]>,
    need_dx: bool,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Option<Tensor<T>> {
    let g = geometry(layer.in_shape, layer.out_shape, kernel, stride, padding);
    let filters = layer.out_shape[2];
    let kk = kernel * kernel * g.c;
    let m = g.oh * g.ow;
    let (in_len, out_len) = (x.sample_len(), m * filters);
    let pointwise = is_pointwise(&g, kernel, stride);
    let group = group_size(x.batch(), m * kk);
    let mut cols = if pointwise { Vec::new() } else { vec![T::zero(); group * m * kk] };
    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut i = 0;
    while i < x.batch() {
        let gn = group.min(x.batch() - i);
        let dys = &dy.data()[i * out_len..(i + gn) * out_len];
        if let Some(gr) = grads.as_deref_mut() {
            let xs = &x.data()[i * in_len..(i + gn) * in_len];
            let a: &[T] = if pointwise {
                xs
            } else {
                for (s, col) in xs.chunks(in_len).zip(cols.chunks_mut(m * kk)) {
                    im2col(&g, kernel, stride, s, col);
                }
                &cols[..gn * m * kk]
            };
            T::gemm(kk, gn * m, filters, a, true, dys, false, &mut gr[0], true);
            if let Some(gb) = gr.get_mut(1) {
                for row in dys.chunks(filters) {
                    gb.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxs = &mut dx.data_mut()[i * in_len..(i + gn) * in_len];
            if pointwise {
                T::gemm(gn * m, filters, kk, dys, false, &layer.params[0], true, dxs, false);
            } else {
                let dcols = &mut cols[..gn * m * kk];
                T::gemm(gn * m, filters, kk, dys, false, &layer.params[0], true, dcols, false);
                for (d, col) in dxs.chunks_mut(in_len).zip(dcols.chunks(m * kk)) {
                    col2im(&g, kernel, stride, col, d);
                }
            }
        }
        i += gn;
    }
    dx
}

fn bn_forward<T: Scalar>(layer: &Layer<T>, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, Cache) {
    let c = layer.in_shape[2];
    let (gamma, beta) = (&layer.params[0], &layer.params[1]);
    let (mean, var, count, cache) = match mode {
        Mode::Inference => {
            let mean: Vec<f64> = layer.state[0].iter().map(|v| v.as_f64()).collect();
            let var: Vec<f64> = layer.state[1].iter().map(|v| v.as_f64()).collect();
            (mean, var, 0, false)
        }
        Mode::Train => {
            let (mean, var, count) = channel_stats(x.data(), c);
            (mean, var, count, true)
        }
    };
    let scale: Vec<f64> = (0..c).map(|k| gamma[k].as_f64() / libm::sqrt(var[k] + BN_EPSILON)).collect();
    let mut y = Tensor::zeros(x.shape());
    for (out, px) in y.data_mut().chunks_mut(c).zip(x.data().chunks(c)) {
        for k in 0..c {
            out[k] = T::of((px[k].as_f64() - mean[k]) * scale[k] + beta[k].as_f64());
        }
    }
    let cache = if cache { Cache::BatchStats { mean, var, count } } else { Cache::None };
    (y, cache)
}

/// Per-channel mean and biased variance over all leading positions.
fn channel_stats<T: Scalar>(data: &[T], c: usize) -> (Vec<f64>, Vec<f64>, usize) {
    let count = data.len() / c;
    let mut mean = vec![0.0f64; c];
    for px in data.chunks(c) {
        mean.iter_mut().zip(px).for_each(|(m, v)| *m += v.as_f64());
    }
    mean.iter_mut().for_each(|m| *m /= count as f64);
    let mut var = vec![0.0f64; c];
    for px in data.chunks(c) {
        for k in 0..c {
            let d = px[k].as_f64() - mean[k];
            var[k] += d * d;
        }
    }
    var.iter_mut().for_each(|v| *v /= count as f64);
    (mean, var, count)
}

fn bn_backward<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    cache: &Cache,
    dy: &Tensor<T>,
    grads: Option<&mut [Vec<T>]>,
    need_dx: bool,
) -> Option<Tensor<T>> {
    let c = layer.in_shape[2];
    let gamma = &layer.params[0];
    let (mean, var, batch) = match cache {
        Cache::BatchStats { mean, var, .. } => (mean.clone(), var.clone(), true),
        _ => (
            layer.state[0].iter().map(|v| v.as_f64()).collect(),
            layer.state[1].iter().map(|v| v.as_f64()).collect(),
            false,
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPSILON)).collect();
    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (px, g) in x.data().chunks(c).zip(dy.data().chunks(c)) {
        for k in 0..c {
            let xhat = (px[k].as_f64() - mean[k]) * inv_std[k];
            sum_dy[k] += g[k].as_f64();
            sum_dy_xhat[k] += g[k].as_f64() * xhat;
        }
    }
    if let Some(gr) = grads {
        for k in 0..c {
            gr[0][k] += T::of(sum_dy_xhat[k]);
            gr[1][k] += T::of(sum_dy[k]);
        }
    }
    if !need_dx {
        return None;
    }
    let count = (x.len() / c) as f64;
    let mut dx = Tensor::zeros(x.shape());
    for ((out, px), g) in dx.data_mut().chunks_mut(c).zip(x.data().chunks(c)).zip(dy.data().chunks(c)) {
        for k in 0..c {
            let gk = gamma[k].as_f64() * inv_std[k];
            out[k] = if batch {
                let xhat = (px[k].as_f64() - mean[k]) * inv_std[k];
                T::of(gk * (g[k].as_f64() - sum_dy[k] / count - xhat * sum_dy_xhat[k] / count))
            } else {
                T::of(gk * g[k].as_f64())
            };
        }
    }
    Some(dx)
}

fn pool_forward<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    kind: PoolKind,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> (Tensor<T>, Cache) {
    let g = geometry(layer.in_shape, layer.out_shape, kernel, stride, padding);
    let n = x.batch();
    let mut y = layer.out_tensor(n);
    let mut argmax = if kind == PoolKind::Max { vec![0u32; y.len()] } else { Vec::new() };
    let out_len = g.oh * g.ow * g.c;
    for i in 0..n {
        let xs = x.sample(i);
        let ys = y.sample_mut(i);
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                for ch in 0..g.c {
                    let mut best = T::neg_infinity();
                    let mut best_at = 0usize;
                    let mut sum = T::zero();
                    let mut count = 0usize;
                    for ky in 0..kernel {
                        let Some(iy) = tap(oy, ky, stride, g.pt, g.ih) else { continue };
                        for kx in 0..kernel {
                            let Some(ix) = tap(ox, kx, stride, g.pl, g.iw) else { continue };
                            let at = (iy * g.iw + ix) * g.c + ch;
                            let v = xs[at];
                            if v > best || count == 0 {
                                best = v;
                                best_at = at;
                            }
                            sum += v;
                            count += 1;
                        }
                    }
                    let o = (oy * g.ow + ox) * g.c + ch;
                    ys[o] = match kind {
                        PoolKind::Max => {
                            argmax[i * out_len + o] = best_at as u32;
                            best
                        }
                        PoolKind::Avg => sum / T::of(count as f64),
                    };
                }
            }
        }
    }
    let cache = if kind == PoolKind::Max { Cache::Argmax(argmax) } else { Cache::None };
    (y, cache)
}

#[allow(clippy::too_many_arguments)]
fn pool_backward<T: Scalar>(
    layer: &Layer<T>,
    x: &Tensor<T>,
    cache: &Cache,
    dy: &Tensor<T>,
    kind: PoolKind,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Tensor<T> {
    let g = geometry(layer.in_shape, layer.out_shape, kernel, stride, padding);
    let mut dx = Tensor::zeros(x.shape());
    let out_len = g.oh * g.ow * g.c;
    for i in 0..x.batch() {
        let dys = dy.sample(i);
        let dxs = dx.sample_mut(i);
        match (kind, cache) {
            (PoolKind::Max, Cache::Argmax(argmax)) => {
                for o in 0..out_len {
                    dxs[argmax[i * out_len + o] as usize] += dys[o];
                }
            }
            _ => {
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        let rows: Vec<usize> = (0..kernel).filter_map(|k| tap(oy, k, stride, g.pt, g.ih)).collect();
                        let cols: Vec<usize> = (0..kernel).filter_map(|k| tap(ox, k, stride, g.pl, g.iw)).collect();
                        let inv = T::one() / T::of((rows.len() * cols.len()) as f64);
                        for ch in 0..g.c {
                            let share = dys[(oy * g.ow + ox) * g.c + ch] * inv;
                            for &iy in &rows {
                                for &ix in &cols {
                                    dxs[(iy * g.iw + ix) * g.c + ch] += share;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng as Stream;
    use rand::SeedableRng;

    #[test]
    fn same_and_valid_geometry() {
        assert_eq!(window_geometry(32, 3, 1, Padding::Same), Some((32, 1)));
        assert_eq!(window_geometry(32, 2, 2, Padding::Valid), Some((16, 0)));
        assert_eq!(window_geometry(7, 7, 1, Padding::Valid), Some((1, 0)));
        assert_eq!(window_geometry(5, 2, 2, Padding::Same), Some((3, 0)));
        assert_eq!(window_geometry(3, 5, 1, Padding::Valid), None);
    }

    #[test]
    fn identity_pointwise_conv() {
        let mut rng = Stream::seed_from_u64(0);
        let spec = LayerSpec::Conv { filters: 3, kernel: 1, stride: 1, padding: Padding::Same, bias: false };
        let mut layer = Layer::<f32>::new(spec, [4, 4, 3], &mut rng).unwrap();
        layer.params[0] = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let x = Tensor::from_vec(&[2, 4, 4, 3], (0..96).map(|v| v as f32 * 0.1).collect()).unwrap();
        let (y, _) = layer.forward(&x, Mode::Inference);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = Stream::seed_from_u64(1);
        let spec = LayerSpec::Conv { filters: 2, kernel: 3, stride: 2, padding: Padding::Same, bias: true };
        let mut layer = Layer::<f64>::new(spec, [5, 5, 2], &mut rng).unwrap();
        layer.params[1] = vec![0.5, -0.25];
        let x = Tensor::from_vec(&[1, 5, 5, 2], (0..50).map(|v| libm::sin(v as f64)).collect()).unwrap();
        let (y, _) = layer.forward(&x, Mode::Inference);
        assert_eq!(y.shape(), &[1, 3, 3, 2]);
        let (_, pad) = window_geometry(5, 3, 2, Padding::Same).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                for f in 0..2 {
                    let mut s = layer.params[1][f];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (iy, ix) = ((oy * 2 + ky) as i64 - pad as i64, (ox * 2 + kx) as i64 - pad as i64);
                            if !(0..5).contains(&iy) || !(0..5).contains(&ix) {
                                continue;
                            }
                            for c in 0..2 {
                                let xv = x.data()[(iy as usize * 5 + ix as usize) * 2 + c];
                                s += xv * layer.params[0][((ky * 3 + kx) * 2 + c) * 2 + f];
                            }
                        }
                    }
                    assert!((y.data()[(oy * 3 + ox) * 2 + f] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_weight_dense_gives_bias() {
        let mut rng = Stream::seed_from_u64(2);
        let mut layer = Layer::<f32>::new(LayerSpec::Dense { units: 3, bias: true }, [2, 2, 1], &mut rng).unwrap();
        layer.params[0].iter_mut().for_each(|v| *v = 0.0);
        layer.params[1] = vec![1.0, 2.0, 3.0];
        let x = Tensor::from_vec(&[2, 2, 2, 1], vec![0.3; 8]).unwrap();
        let (y, _) = layer.forward(&x, Mode::Inference);
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn relu_blocks_negative_gradient() {
        let mut rng = Stream::seed_from_u64(3);
        let layer = Layer::<f32>::new(LayerSpec::Act(Activation::Relu), [1, 1, 2], &mut rng).unwrap();
        let x = Tensor::from_vec(&[1, 1, 1, 2], vec![-1.0, 2.0]).unwrap();
        let dy = Tensor::from_vec(&[1, 1, 1, 2], vec![5.0, 5.0]).unwrap();
        let dx = layer.backward(&x, &Cache::None, &dy, None, true).unwrap();
        assert_eq!(dx.data(), &[0.0, 5.0]);
    }

    #[test]
    fn avg_pool_same_excludes_padding() {
        let mut rng = Stream::seed_from_u64(4);
        let spec = LayerSpec::Pool { kind: PoolKind::Avg, kernel: 2, stride: 2, padding: Padding::Same };
        let layer = Layer::<f64>::new(spec, [3, 3, 1], &mut rng).unwrap();
        let x = Tensor::from_vec(&[1, 3, 3, 1], (1..=9).map(|v| v as f64).collect()).unwrap();
        let (y, _) = layer.forward(&x, Mode::Inference);
        assert_eq!(y.data(), &[3.0, 4.5, 7.5, 9.0]);
    }

    #[test]
    fn batch_norm_running_stats_update() {
        let mut rng = Stream::seed_from_u64(5);
        let mut layer = Layer::<f64>::new(LayerSpec::BatchNorm, [1, 1, 1], &mut rng).unwrap();
        let x = Tensor::from_vec(&[4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, cache) = layer.forward(&x, Mode::Train);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        layer.commit_stats(&cache);
        assert!((layer.state[0][0] - 0.25).abs() < 1e-12);
        // unbiased variance 5/3
        assert!((layer.state[1][0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
        let (a, _) = layer.forward(&x, Mode::Inference);
        let (b, _) = layer.forward(&x, Mode::Inference);
        assert_eq!(a, b);
    }
}
