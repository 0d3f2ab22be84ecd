//! Differentiable building blocks with hand-written backward passes.
//!
//! Forward functions return the output together with whatever the backward
//! pass needs; backward functions accumulate parameter gradients into a
//! same-shaped gradient value and return the gradient w.r.t. the input.

use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::impl_parameters;
use crate::params::{join, NamedView, NamedViewMut, Parameters};

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Affine map `y = x Wᵀ + b` applied row-wise; `weight` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Option<Array1<f64>>,
}

impl Parameters for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedView<'a>>) {
        self.weight.collect(&join(prefix, "weight"), out);
        self.bias.collect(&join(prefix, "bias"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedViewMut<'a>>) {
        self.weight.collect_mut(&join(prefix, "weight"), out);
        self.bias.collect_mut(&join(prefix, "bias"), out);
    }
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` initialization for weight and bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let weight = Array2::from_shape_fn((fan_out, fan_in), |_| dist.sample(rng));
        let bias = bias.then(|| Array1::from_shape_fn(fan_out, |_| dist.sample(rng)));
        Linear { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize, bias: bool) -> Self {
        Linear {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: bias.then(|| Array1::zeros(fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn backward(&self, x: &Array2<f64>, grad_out: &Array2<f64>, grads: &mut Linear) -> Array2<f64> {
        grads.weight += &grad_out.t().dot(x);
        if let Some(gb) = grads.bias.as_mut() {
            *gb += &grad_out.sum_axis(Axis(0));
        }
        grad_out.dot(&self.weight)
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the last axis with learnable gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}
impl_parameters!(LayerNorm { gamma, beta });

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let n = x.ncols() as f64;
        let mut x_hat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in x_hat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let inv = *s;
            row.mapv_inplace(|v| v * inv);
        }
        let y = &x_hat * &self.gamma + &self.beta;
        (y, LayerNormCache { x_hat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, grad_out: &Array2<f64>, grads: &mut LayerNorm) -> Array2<f64> {
        grads.gamma += &(grad_out * &cache.x_hat).sum_axis(Axis(0));
        grads.beta += &grad_out.sum_axis(Axis(0));
        let n = grad_out.ncols() as f64;
        let mut gx = grad_out * &self.gamma;
        for ((mut g, xh), &inv) in gx
            .rows_mut()
            .into_iter()
            .zip(cache.x_hat.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = g.sum() / n;
            let mean_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / n;
            Zip::from(&mut g).and(&xh).for_each(|gi, &xi| {
                *gi = inv * (*gi - mean_g - xi * mean_gx);
            });
        }
        gx
    }
}

/// Inverted-dropout mask (entries `0` or `1/(1-p)`), or `None` when inactive.
pub fn dropout_mask<R: Rng + ?Sized>(shape: (usize, usize), p: f64, rng: Option<&mut R>) -> Option<Array2<f64>> {
    let rng = rng?;
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(Array2::from_shape_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep }))
}

/// Two-layer perceptron `Lin(drop(SiLU(Lin(x))))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}
impl_parameters!(Mlp { fc1, fc2 });

#[derive(Debug, Clone)]
pub struct MlpCache {
    input: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    mask: Option<Array2<f64>>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Mlp {
            fc1: Linear::new(d_in, d_hidden, true, rng),
            fc2: Linear::new(d_hidden, d_out, true, rng),
        }
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Array2<f64>, dropout: f64, rng: Option<&mut R>) -> (Array2<f64>, MlpCache) {
        let pre = self.fc1.forward(x);
        let mut hidden = pre.mapv(silu);
        let mask = dropout_mask(hidden.dim(), dropout, rng);
        if let Some(m) = &mask {
            hidden *= m;
        }
        let y = self.fc2.forward(&hidden);
        (
            y,
            MlpCache {
                input: x.clone(),
                pre,
                hidden,
                mask,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache, grad_out: &Array2<f64>, grads: &mut Mlp) -> Array2<f64> {
        let mut g_hidden = self.fc2.backward(&cache.hidden, grad_out, &mut grads.fc2);
        if let Some(m) = &cache.mask {
            g_hidden *= m;
        }
        Zip::from(&mut g_hidden).and(&cache.pre).for_each(|g, &p| *g *= silu_grad(p));
        self.fc1.backward(&cache.input, &g_hidden, &mut grads.fc1)
    }
}

/// Row-wise L2 normalization; returns the normalized rows and their norms.
pub fn l2_normalize_rows(x: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let mut y = x.clone();
    for (mut row, &n) in y.rows_mut().into_iter().zip(norms.iter()) {
        let n = n.max(1e-12);
        row.mapv_inplace(|v| v / n);
    }
    (y, norms)
}

pub fn l2_normalize_rows_backward(y: &Array2<f64>, norms: &Array1<f64>, grad_out: &Array2<f64>) -> Array2<f64> {
    let mut gx = grad_out.clone();
    for ((mut g, yr), &n) in gx.rows_mut().into_iter().zip(y.rows()).zip(norms.iter()) {
        let proj = g.dot(&yr);
        let n = n.max(1e-12);
        Zip::from(&mut g).and(&yr).for_each(|gi, &yi| *gi = (*gi - yi * proj) / n);
    }
    gx
}
