//! Minimal sequential network with hand-written backward passes.
//!
//! Convolutional activations are kept as `[channels, batch * length]`
//! matrices so that a whole batch runs through one GEMM per convolution
//! (im2col) and batch-norm statistics are plain row reductions. Dense
//! activations are `[batch, features]`.

use std::fmt::{Debug, Display};

use ndarray::{s, Array1, Array2, ArrayD, ArrayView2, ArrayViewMut2, Axis, Ix2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Floating point type the network runs in: `f32` for training, `f64`
/// for gradient checks.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + Serialize
    + DeserializeOwned
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        let value = ArrayD::from_shape_simple_fn(shape, || T::from_f64_lossy(dist.sample(rng)));
        Param::new(value)
    }

    fn matrix(&self) -> ArrayView2<'_, T> {
        self.value.view().into_dimensionality::<Ix2>().expect("2-d parameter")
    }

    fn grad_matrix(&mut self) -> ArrayViewMut2<'_, T> {
        self.grad
            .view_mut()
            .into_dimensionality::<Ix2>()
            .expect("2-d parameter")
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Activation flowing between layers.
#[derive(Debug, Clone, PartialEq)]
pub enum Act<T> {
    /// `[channels, batch * len]`, sample `b` occupying columns `b*len..(b+1)*len`.
    Seq { data: Array2<T>, batch: usize, len: usize },
    /// `[batch, features]`.
    Flat(Array2<T>),
}

impl<T: Scalar> Act<T> {
    pub fn into_flat(self) -> Array2<T> {
        match self {
            Act::Flat(a) => a,
            Act::Seq { .. } => panic!("expected a flat activation"),
        }
    }

    fn seq(self) -> (Array2<T>, usize, usize) {
        match self {
            Act::Seq { data, batch, len } => (data, batch, len),
            Act::Flat(_) => panic!("expected a sequence activation"),
        }
    }

    fn map(self, f: impl FnOnce(Array2<T>) -> Array2<T>) -> Self {
        match self {
            Act::Seq { data, batch, len } => Act::Seq {
                data: f(data),
                batch,
                len,
            },
            Act::Flat(a) => Act::Flat(f(a)),
        }
    }

    fn data(&self) -> &Array2<T> {
        match self {
            Act::Seq { data, .. } => data,
            Act::Flat(a) => a,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d<T> {
    /// `[out_channels, in_channels * kernel]`.
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl<T: Scalar> Conv1d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((in_channels * kernel) as f64).sqrt();
        Conv1d {
            weight: Param::uniform(&[out_channels, in_channels * kernel], bound, rng),
            bias: Param::uniform(&[out_channels], bound, rng),
            in_channels,
            out_channels,
            kernel,
        }
    }

    fn forward(&self, x: &Array2<T>, batch: usize, len: usize) -> (Array2<T>, Array2<T>) {
        let cols = im2col(x, batch, len, self.kernel);
        let mut out = self.weight.matrix().dot(&cols);
        let bias = self.bias.value.as_slice().expect("contiguous");
        for (mut row, &b) in out.rows_mut().into_iter().zip(bias) {
            row.mapv_inplace(|v| v + b);
        }
        (out, cols)
    }

    fn backward(&mut self, dy: &Array2<T>, cols: &Array2<T>, batch: usize, len: usize) -> Array2<T> {
        ndarray::linalg::general_mat_mul(T::one(), dy, &cols.t(), T::one(), &mut self.weight.grad_matrix());
        let db = dy.sum_axis(Axis(1));
        self.bias.grad.zip_mut_with(&db.into_dyn(), |g, &d| *g = *g + d);
        let dcols = self.weight.matrix().t().dot(dy);
        col2im(&dcols, self.in_channels, batch, len, self.kernel)
    }
}

/// Unfolds "same"-padded windows: row `c*k + j` holds input channel `c`
/// shifted by `j - k/2`.
pub fn im2col<T: Scalar>(x: &Array2<T>, batch: usize, len: usize, kernel: usize) -> Array2<T> {
    let c_in = x.nrows();
    let pad = (kernel / 2) as isize;
    let mut cols = Array2::<T>::zeros((c_in * kernel, batch * len));
    for c in 0..c_in {
        let src = x.row(c);
        let src = src.as_slice().expect("standard layout");
        for j in 0..kernel {
            let off = j as isize - pad;
            let lo = (-off).max(0) as usize;
            let hi = (len as isize - off).min(len as isize).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let mut dst = cols.row_mut(c * kernel + j);
            let dst = dst.as_slice_mut().expect("standard layout");
            for b in 0..batch {
                let base = b * len;
                let s0 = (base as isize + lo as isize + off) as usize;
                dst[base + lo..base + hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub fn col2im<T: Scalar>(cols: &Array2<T>, c_in: usize, batch: usize, len: usize, kernel: usize) -> Array2<T> {
    let pad = (kernel / 2) as isize;
    let mut x = Array2::<T>::zeros((c_in, batch * len));
    for c in 0..c_in {
        let mut dst = x.row_mut(c);
        let dst = dst.as_slice_mut().expect("standard layout");
        for j in 0..kernel {
            let off = j as isize - pad;
            let lo = (-off).max(0) as usize;
            let hi = (len as isize - off).min(len as isize).max(0) as usize;
            if lo >= hi {
                continue;
            }
            let src = cols.row(c * kernel + j);
            let src = src.as_slice().expect("standard layout");
            for b in 0..batch {
                let base = b * len;
                let d0 = (base as isize + lo as isize + off) as usize;
                for (d, &s) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&src[base + lo..base + hi]) {
                    *d = *d + s;
                }
            }
        }
    }
    x
}

/// Per-channel batch normalization over `batch * len` positions.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(ArrayD::ones(vec![channels])),
            beta: Param::new(ArrayD::zeros(vec![channels])),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn forward_eval(&self, x: &mut Array2<T>) {
        let eps = T::from_f64_lossy(self.eps);
        for (c, mut row) in x.rows_mut().into_iter().enumerate() {
            let scale = self.gamma.value[c] / (self.running_var[c] + eps).sqrt();
            let shift = self.beta.value[c] - self.running_mean[c] * scale;
            row.mapv_inplace(|v| v * scale + shift);
        }
    }

    /// Normalizes with batch statistics; returns `(y, xhat, inv_std)`.
    fn forward_train(&mut self, x: &Array2<T>) -> (Array2<T>, Array2<T>, Array1<T>) {
        let n = x.ncols();
        let nt = T::from_usize(n).unwrap();
        let eps = T::from_f64_lossy(self.eps);
        let mom = T::from_f64_lossy(self.momentum);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (c, mut row) in xhat.rows_mut().into_iter().enumerate() {
            let mean = row.sum() / nt;
            let var = row.iter().fold(T::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / nt;
            let istd = T::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * istd);
            inv_std[c] = istd;
            let unbiased = if n > 1 {
                var * nt / T::from_usize(n - 1).unwrap()
            } else {
                var
            };
            self.running_mean[c] = (T::one() - mom) * self.running_mean[c] + mom * mean;
            self.running_var[c] = (T::one() - mom) * self.running_var[c] + mom * unbiased;
        }
        let mut y = xhat.clone();
        for (c, mut row) in y.rows_mut().into_iter().enumerate() {
            let g = self.gamma.value[c];
            let b = self.beta.value[c];
            row.mapv_inplace(|v| v * g + b);
        }
        (y, xhat, inv_std)
    }

    fn backward(&mut self, dy: &Array2<T>, xhat: &Array2<T>, inv_std: &Array1<T>) -> Array2<T> {
        let nt = T::from_usize(dy.ncols()).unwrap();
        let mut dx = Array2::zeros(dy.raw_dim());
        for c in 0..dy.nrows() {
            let dyr = dy.row(c);
            let xr = xhat.row(c);
            let sum_dy = dyr.sum();
            let sum_dy_x = dyr.iter().zip(xr.iter()).fold(T::zero(), |a, (&d, &x)| a + d * x);
            self.gamma.grad[c] = self.gamma.grad[c] + sum_dy_x;
            self.beta.grad[c] = self.beta.grad[c] + sum_dy;
            let k = self.gamma.value[c] * inv_std[c] / nt;
            let mut dxr = dx.row_mut(c);
            for ((d, &g), &x) in dxr.iter_mut().zip(dyr.iter()).zip(xr.iter()) {
                *d = k * (nt * g - sum_dy - x * sum_dy_x);
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct Linear<T> {
    /// `[out_features, in_features]`.
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Linear {
            weight: Param::uniform(&[out_features, in_features], bound, rng),
            bias: Param::uniform(&[out_features], bound, rng),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight.matrix().t());
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        for mut row in y.rows_mut() {
            row.zip_mut_with(&b, |v, &bi| *v = *v + bi);
        }
        y
    }

    fn backward(&mut self, dy: &Array2<T>, x: &Array2<T>) -> Array2<T> {
        ndarray::linalg::general_mat_mul(T::one(), &dy.t(), x, T::one(), &mut self.weight.grad_matrix());
        let db = dy.sum_axis(Axis(0));
        self.bias.grad.zip_mut_with(&db.into_dyn(), |g, &d| *g = *g + d);
        dy.dot(&self.weight.matrix())
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv(Conv1d<T>),
    Relu,
    BatchNorm(BatchNorm<T>),
    /// Non-overlapping max pooling with this kernel (= stride).
    MaxPool(usize),
    /// Mean over time; turns a sequence into a flat activation.
    GlobalAvgPool,
    Linear(Linear<T>),
    Dropout(f64),
}

/// Saved intermediates of one layer for the backward pass.
#[derive(Debug, Clone)]
enum Cache<T> {
    Conv { cols: Array2<T>, batch: usize, len: usize },
    Relu { out: Array2<T> },
    BatchNorm { xhat: Array2<T>, inv_std: Array1<T> },
    MaxPool { argmax: Array2<usize>, in_cols: usize, batch: usize, len: usize },
    Gap { channels: usize, batch: usize, len: usize },
    Linear { input: Array2<T> },
    Dropout { mask: Option<Array2<T>> },
}

/// Per-layer caches of a training forward pass.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct Network<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Network { layers }
    }

    pub fn forward_eval(&self, mut x: Act<T>) -> Act<T> {
        for layer in &self.layers {
            x = match layer {
                Layer::Conv(conv) => {
                    let (data, batch, len) = x.seq();
                    let (out, _) = conv.forward(&data, batch, len);
                    Act::Seq { data: out, batch, len }
                }
                Layer::Relu => x.map(|mut a| {
                    a.mapv_inplace(|v| v.max(T::zero()));
                    a
                }),
                Layer::BatchNorm(bn) => x.map(|mut a| {
                    bn.forward_eval(&mut a);
                    a
                }),
                Layer::MaxPool(k) => {
                    let (data, batch, len) = x.seq();
                    let (out, _) = max_pool(&data, batch, len, *k);
                    Act::Seq { data: out, batch, len: len / k }
                }
                Layer::GlobalAvgPool => {
                    let (data, batch, len) = x.seq();
                    Act::Flat(global_avg_pool(&data, batch, len))
                }
                Layer::Linear(lin) => Act::Flat(lin.forward(&x.into_flat())),
                Layer::Dropout(_) => x,
            };
        }
        x
    }

    /// Forward pass with batch statistics and dropout, updating batch-norm
    /// running statistics.
    pub fn forward_train(&mut self, mut x: Act<T>, rng: &mut impl Rng) -> (Act<T>, Tape<T>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &mut self.layers {
            let (next, cache) = match layer {
                Layer::Conv(conv) => {
                    let (data, batch, len) = x.seq();
                    let (out, cols) = conv.forward(&data, batch, len);
                    (Act::Seq { data: out, batch, len }, Cache::Conv { cols, batch, len })
                }
                Layer::Relu => {
                    let y = x.map(|mut a| {
                        a.mapv_inplace(|v| v.max(T::zero()));
                        a
                    });
                    let out = y.data().clone();
                    (y, Cache::Relu { out })
                }
                Layer::BatchNorm(bn) => {
                    let (data, batch, len) = x.seq();
                    let (y, xhat, inv_std) = bn.forward_train(&data);
                    (Act::Seq { data: y, batch, len }, Cache::BatchNorm { xhat, inv_std })
                }
                Layer::MaxPool(k) => {
                    let (data, batch, len) = x.seq();
                    let (out, argmax) = max_pool(&data, batch, len, *k);
                    let in_cols = data.ncols();
                    (
                        Act::Seq { data: out, batch, len: len / *k },
                        Cache::MaxPool { argmax, in_cols, batch, len },
                    )
                }
                Layer::GlobalAvgPool => {
                    let (data, batch, len) = x.seq();
                    let channels = data.nrows();
                    (Act::Flat(global_avg_pool(&data, batch, len)), Cache::Gap { channels, batch, len })
                }
                Layer::Linear(lin) => {
                    let input = x.into_flat();
                    (Act::Flat(lin.forward(&input)), Cache::Linear { input })
                }
                Layer::Dropout(p) => {
                    if *p <= 0.0 {
                        (x, Cache::Dropout { mask: None })
                    } else {
                        let keep = 1.0 - *p;
                        let scale = T::from_f64_lossy(1.0 / keep);
                        let mask = x.data().mapv(|_| if rng.random_bool(keep) { scale } else { T::zero() });
                        let y = x.map(|a| a * &mask);
                        (y, Cache::Dropout { mask: Some(mask) })
                    }
                }
            };
            caches.push(cache);
            x = next;
        }
        (x, Tape { caches })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, tape: &Tape<T>, mut dy: Act<T>) -> Act<T> {
        assert_eq!(tape.caches.len(), self.layers.len(), "tape from another network");
        for (layer, cache) in self.layers.iter_mut().zip(&tape.caches).rev() {
            dy = match (layer, cache) {
                (Layer::Conv(conv), Cache::Conv { cols, batch, len }) => {
                    let (g, _, _) = dy.seq();
                    let dx = conv.backward(&g, cols, *batch, *len);
                    Act::Seq { data: dx, batch: *batch, len: *len }
                }
                (Layer::Relu, Cache::Relu { out }) => dy.map(|mut g| {
                    g.zip_mut_with(out, |d, &o| {
                        if o <= T::zero() {
                            *d = T::zero()
                        }
                    });
                    g
                }),
                (Layer::BatchNorm(bn), Cache::BatchNorm { xhat, inv_std }) => {
                    let (g, batch, len) = dy.seq();
                    Act::Seq {
                        data: bn.backward(&g, xhat, inv_std),
                        batch,
                        len,
                    }
                }
                (Layer::MaxPool(_), Cache::MaxPool { argmax, in_cols, batch, len }) => {
                    let (g, _, _) = dy.seq();
                    let mut dx = Array2::zeros((g.nrows(), *in_cols));
                    for ((c, j), &src) in argmax.indexed_iter() {
                        dx[[c, src]] = dx[[c, src]] + g[[c, j]];
                    }
                    Act::Seq { data: dx, batch: *batch, len: *len }
                }
                (Layer::GlobalAvgPool, Cache::Gap { channels, batch, len }) => {
                    let g = dy.into_flat();
                    let inv = T::one() / T::from_usize(*len).unwrap();
                    let mut dx = Array2::zeros((*channels, batch * len));
                    for b in 0..*batch {
                        for c in 0..*channels {
                            let v = g[[b, c]] * inv;
                            dx.slice_mut(s![c, b * len..(b + 1) * len]).fill(v);
                        }
                    }
                    Act::Seq { data: dx, batch: *batch, len: *len }
                }
                (Layer::Linear(lin), Cache::Linear { input }) => {
                    let g = dy.into_flat();
                    Act::Flat(lin.backward(&g, input))
                }
                (Layer::Dropout(_), Cache::Dropout { mask }) => match mask {
                    Some(m) => dy.map(|g| g * m),
                    None => dy,
                },
                _ => unreachable!("tape does not match layer"),
            };
        }
        dy
    }

    /// Parameters in a fixed order, named `layers.<i>.<field>`.
    pub fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    out.push((format!("layers.{i}.weight"), &c.weight));
                    out.push((format!("layers.{i}.bias"), &c.bias));
                }
                Layer::BatchNorm(b) => {
                    out.push((format!("layers.{i}.gamma"), &b.gamma));
                    out.push((format!("layers.{i}.beta"), &b.beta));
                }
                Layer::Linear(l) => {
                    out.push((format!("layers.{i}.weight"), &l.weight));
                    out.push((format!("layers.{i}.bias"), &l.bias));
                }
                _ => {}
            }
        }
        out
    }

    /// Same order as [`Network::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.push(&mut c.weight);
                    out.push(&mut c.bias);
                }
                Layer::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                Layer::Linear(l) => {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn named_buffers(&self) -> Vec<(String, &Array1<T>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm(b) = layer {
                out.push((format!("layers.{i}.running_mean"), &b.running_mean));
                out.push((format!("layers.{i}.running_var"), &b.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Array1<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(b) = layer {
                out.push(&mut b.running_mean);
                out.push(&mut b.running_var);
            }
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn n_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Non-overlapping max pool; returns the pooled matrix and, for every
/// output cell, the input column that won (first on ties).
fn max_pool<T: Scalar>(x: &Array2<T>, batch: usize, len: usize, k: usize) -> (Array2<T>, Array2<usize>) {
    let out_len = len / k;
    let channels = x.nrows();
    let mut out = Array2::zeros((channels, batch * out_len));
    let mut argmax = Array2::zeros((channels, batch * out_len));
    for c in 0..channels {
        let row = x.row(c);
        for b in 0..batch {
            for j in 0..out_len {
                let start = b * len + j * k;
                let mut best = start;
                for i in start + 1..start + k {
                    if row[i] > row[best] {
                        best = i;
                    }
                }
                out[[c, b * out_len + j]] = row[best];
                argmax[[c, b * out_len + j]] = best;
            }
        }
    }
    (out, argmax)
}

fn global_avg_pool<T: Scalar>(x: &Array2<T>, batch: usize, len: usize) -> Array2<T> {
    let inv = T::one() / T::from_usize(len).unwrap();
    let mut out = Array2::zeros((batch, x.nrows()));
    for c in 0..x.nrows() {
        for b in 0..batch {
            out[[b, c]] = x.slice(s![c, b * len..(b + 1) * len]).sum() * inv;
        }
    }
    out
}

/// Row-wise softmax, shifted by the row maximum.
pub fn softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}
