//! Layers with explicit forward caches and analytic backward passes.
//!
//! Spatial activations are `(N, C, H, W)` in standard layout; flat ones are
//! `(N, F)`. Convolutions are valid (no padding), stride 1, computed per
//! sample as one matrix product over an unfolded patch matrix.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone)]
pub enum Activation {
    Spatial(Array4<f64>),
    Flat(Array2<f64>),
}

impl Activation {
    fn shape_string(&self) -> String {
        match self {
            Activation::Spatial(a) => format!("{:?}", a.dim()),
            Activation::Flat(a) => format!("{:?}", a.dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Array2::zeros((outputs, inputs)), bias: Array1::zeros(outputs) }
    }

    /// Uniform weights in `±sqrt(gain / fan_in)`, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, gain: f64, rng: &mut R) -> Self {
        let bound = (gain / inputs as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((outputs, inputs), || rng.random_range(-bound..=bound));
        Self { weight, bias: Array1::zeros(outputs) }
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.inputs() {
            return invalid(format!("linear layer expects {} inputs, got {}", self.inputs(), x.ncols()));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        general_mat_mul(1.0, &dy.t(), &x, 1.0, &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub kernel: usize,
    /// `(out_channels, in_channels * kernel * kernel)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self {
            in_channels,
            kernel,
            weight: Array2::zeros((out_channels, in_channels * kernel * kernel)),
            bias: Array1::zeros(out_channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(in_channels: usize, out_channels: usize, kernel: usize, gain: f64, rng: &mut R) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (gain / fan_in as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((out_channels, fan_in), || rng.random_range(-bound..=bound));
        Self { in_channels, kernel, weight, bias: Array1::zeros(out_channels) }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    /// Returns the output and the unfolded patches `(N, C*k*k, Ho*Wo)`.
    pub fn forward(&self, x: &Array4<f64>) -> Result<(Array4<f64>, Array3<f64>)> {
        let (n, c, h, w) = x.dim();
        let k = self.kernel;
        if c != self.in_channels || h < k || w < k {
            return invalid(format!("conv {}x{k}x{k} cannot consume input {:?}", self.in_channels, x.dim()));
        }
        let (ho, wo) = (h - k + 1, w - k + 1);
        let o = self.out_channels();
        let mut cols = Array3::<f64>::zeros((n, c * k * k, ho * wo));
        let mut out = Array4::<f64>::zeros((n, o, ho, wo));
        let xs = x.as_standard_layout();
        for i in 0..n {
            let xi = xs.slice(s![i, .., .., ..]);
            let src = xi.as_slice().expect("standard layout");
            let mut ci = cols.slice_mut(s![i, .., ..]);
            let dst = ci.as_slice_mut().expect("standard layout");
            for ch in 0..c {
                for ki in 0..k {
                    for kj in 0..k {
                        let row = &mut dst[((ch * k + ki) * k + kj) * ho * wo..][..ho * wo];
                        for oy in 0..ho {
                            let from = ch * h * w + (oy + ki) * w + kj;
                            row[oy * wo..(oy + 1) * wo].copy_from_slice(&src[from..from + wo]);
                        }
                    }
                }
            }
            let mut oi = out.slice_mut(s![i, .., .., ..]).into_shape_with_order((o, ho * wo)).expect("contiguous");
            general_mat_mul(1.0, &self.weight, &cols.slice(s![i, .., ..]), 0.0, &mut oi);
            for (mut plane, &b) in oi.outer_iter_mut().zip(&self.bias) {
                plane += b;
            }
        }
        Ok((out, cols))
    }

    /// Accumulates parameter gradients; returns the input gradient when `need_input`.
    pub fn backward(
        &self,
        cols: &Array3<f64>,
        input_dim: (usize, usize, usize, usize),
        dy: &Array4<f64>,
        grad: &mut Conv2d,
        need_input: bool,
    ) -> Option<Array4<f64>> {
        let (n, c, h, w) = input_dim;
        let k = self.kernel;
        let (_, o, ho, wo) = dy.dim();
        let mut dx = need_input.then(|| Array4::<f64>::zeros((n, c, h, w)));
        let mut dcols = Array2::<f64>::zeros((c * k * k, ho * wo));
        for i in 0..n {
            let dyi = dy.slice(s![i, .., .., ..]).into_shape_with_order((o, ho * wo)).expect("contiguous");
            let ci = cols.slice(s![i, .., ..]);
            general_mat_mul(1.0, &dyi, &ci.t(), 1.0, &mut grad.weight);
            grad.bias += &dyi.sum_axis(Axis(1));
            if let Some(dx) = dx.as_mut() {
                general_mat_mul(1.0, &self.weight.t(), &dyi, 0.0, &mut dcols);
                let mut dxi = dx.slice_mut(s![i, .., .., ..]);
                let dst = dxi.as_slice_mut().expect("standard layout");
                let src = dcols.as_slice().expect("standard layout");
                for ch in 0..c {
                    for ki in 0..k {
                        for kj in 0..k {
                            let row = &src[((ch * k + ki) * k + kj) * ho * wo..][..ho * wo];
                            for oy in 0..ho {
                                let to = ch * h * w + (oy + ki) * w + kj;
                                for (d, s) in dst[to..to + wo].iter_mut().zip(&row[oy * wo..(oy + 1) * wo]) {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize },
    Relu,
    /// Non-overlapping max pooling with a square window.
    MaxPool { size: usize },
    Flatten,
    Linear { out: usize },
    GlobalAvgPool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    Relu,
    MaxPool(usize),
    Flatten,
    Linear(Linear),
    GlobalAvgPool,
}

#[derive(Debug)]
pub(crate) enum Cache {
    Conv { cols: Array3<f64>, input_dim: (usize, usize, usize, usize) },
    Relu { output: Activation },
    MaxPool { argmax: Vec<usize>, input_dim: (usize, usize, usize, usize) },
    Flatten { input_dim: (usize, usize, usize, usize) },
    Linear { input: Array2<f64> },
    GlobalAvgPool { input_dim: (usize, usize, usize, usize) },
}

fn max_pool(x: &Array4<f64>, size: usize) -> (Array4<f64>, Vec<usize>) {
    let (n, c, h, w) = x.dim();
    let (ho, wo) = (h / size, w / size);
    let xs = x.as_standard_layout();
    let src = xs.as_slice().expect("standard layout");
    let mut out = Array4::<f64>::zeros((n, c, ho, wo));
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for (plane, o) in out.as_slice_mut().expect("fresh array").chunks_mut(ho * wo).enumerate() {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                o[oy * wo + ox] = src[best];
                argmax.push(best);
            }
        }
    }
    (out, argmax)
}

impl Layer {
    pub(crate) fn forward(&self, x: Activation, keep_cache: bool) -> Result<(Activation, Option<Cache>)> {
        let mismatch = |x: &Activation| invalid(format!("layer {} cannot consume activation {}", self.name(), x.shape_string()));
        Ok(match (self, x) {
            (Layer::Conv(conv), Activation::Spatial(x)) => {
                let (y, cols) = conv.forward(&x)?;
                (Activation::Spatial(y), keep_cache.then(|| Cache::Conv { cols, input_dim: x.dim() }))
            }
            (Layer::Relu, x) => {
                let y = match x {
                    Activation::Spatial(a) => Activation::Spatial(a.mapv_into(|v| v.max(0.0))),
                    Activation::Flat(a) => Activation::Flat(a.mapv_into(|v| v.max(0.0))),
                };
                let cache = keep_cache.then(|| Cache::Relu { output: y.clone() });
                (y, cache)
            }
            (Layer::MaxPool(size), Activation::Spatial(x)) => {
                if x.dim().2 < *size || x.dim().3 < *size {
                    return mismatch(&Activation::Spatial(x));
                }
                let (y, argmax) = max_pool(&x, *size);
                (Activation::Spatial(y), keep_cache.then(|| Cache::MaxPool { argmax, input_dim: x.dim() }))
            }
            (Layer::Flatten, Activation::Spatial(x)) => {
                let dim = x.dim();
                let flat = x
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order((dim.0, dim.1 * dim.2 * dim.3))
                    .expect("contiguous");
                (Activation::Flat(flat), keep_cache.then_some(Cache::Flatten { input_dim: dim }))
            }
            (Layer::Linear(lin), Activation::Flat(x)) => {
                let y = lin.forward(x.view())?;
                (Activation::Flat(y), keep_cache.then_some(Cache::Linear { input: x }))
            }
            (Layer::GlobalAvgPool, Activation::Spatial(x)) => {
                let dim = x.dim();
                let y = x.mean_axis(Axis(3)).and_then(|m| m.mean_axis(Axis(2))).expect("nonempty");
                (Activation::Flat(y), keep_cache.then_some(Cache::GlobalAvgPool { input_dim: dim }))
            }
            (_, x) => return mismatch(&x),
        })
    }

    pub(crate) fn backward(&self, cache: &Cache, dy: Activation, grad: &mut Layer, need_input: bool) -> Option<Activation> {
        match (self, cache, dy, grad) {
            (Layer::Conv(conv), Cache::Conv { cols, input_dim }, Activation::Spatial(dy), Layer::Conv(g)) => {
                conv.backward(cols, *input_dim, &dy, g, need_input).map(Activation::Spatial)
            }
            (Layer::Relu, Cache::Relu { output }, dy, _) => Some(match (output, dy) {
                (Activation::Spatial(o), Activation::Spatial(mut d)) => {
                    d.zip_mut_with(o, |g, &v| if v <= 0.0 { *g = 0.0 });
                    Activation::Spatial(d)
                }
                (Activation::Flat(o), Activation::Flat(mut d)) => {
                    d.zip_mut_with(o, |g, &v| if v <= 0.0 { *g = 0.0 });
                    Activation::Flat(d)
                }
                _ => unreachable!("relu gradient shape follows its output"),
            }),
            (Layer::MaxPool(_), Cache::MaxPool { argmax, input_dim }, Activation::Spatial(dy), _) => {
                let mut dx = Array4::<f64>::zeros(*input_dim);
                let dst = dx.as_slice_mut().expect("fresh array");
                for (&idx, &g) in argmax.iter().zip(dy.as_standard_layout().iter()) {
                    dst[idx] += g;
                }
                Some(Activation::Spatial(dx))
            }
            (Layer::Flatten, Cache::Flatten { input_dim }, Activation::Flat(dy), _) => Some(Activation::Spatial(
                dy.as_standard_layout().into_owned().into_shape_with_order(*input_dim).expect("contiguous"),
            )),
            (Layer::Linear(lin), Cache::Linear { input }, Activation::Flat(dy), Layer::Linear(g)) => {
                let dx = lin.backward(input.view(), dy.view(), g);
                need_input.then_some(Activation::Flat(dx))
            }
            (Layer::GlobalAvgPool, Cache::GlobalAvgPool { input_dim }, Activation::Flat(dy), _) => {
                let (n, c, h, w) = *input_dim;
                let scale = 1.0 / (h * w) as f64;
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                for ((i, ch), &g) in dy.indexed_iter() {
                    dx.slice_mut(s![i, ch, .., ..]).fill(g * scale);
                }
                Some(Activation::Spatial(dx))
            }
            _ => unreachable!("cache does not match layer"),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::Relu => "relu",
            Layer::MaxPool(_) => "max_pool",
            Layer::Flatten => "flatten",
            Layer::Linear(_) => "linear",
            Layer::GlobalAvgPool => "global_avg_pool",
        }
    }

    pub fn zeros_like(&self) -> Layer {
        match self {
            Layer::Conv(c) => Layer::Conv(Conv2d::zeros(c.in_channels, c.out_channels(), c.kernel)),
            Layer::Linear(l) => Layer::Linear(Linear::zeros(l.inputs(), l.outputs())),
            other => other.clone(),
        }
    }
}
