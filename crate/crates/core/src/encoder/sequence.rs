use ndarray::Array2;
use rand::Rng;

use crate::error::Result;
use crate::impl_parameters;
use crate::nn::Linear;
use crate::ssd::{SsdCache, SsdConfig, SsdLayer};

/// Residual SSD stack followed by a linear map:
/// `H_S = Lin(SSD(SSD(H_E) + H_E) + H_E)` for two layers. Every layer's
/// residual adds the stack input `H_E`, as nested above.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEncoder {
    pub layers: Vec<SsdLayer>,
    pub out: Linear,
}
impl_parameters!(SequenceEncoder { layers, out });

#[derive(Debug, Clone)]
pub struct SequenceCache {
    layers: Vec<SsdCache>,
    last: Array2<f64>,
}

impl SequenceEncoder {
    pub fn new<R: Rng + ?Sized>(cfg: &SsdConfig, n_layers: usize, rng: &mut R) -> Self {
        SequenceEncoder {
            layers: (0..n_layers).map(|_| SsdLayer::new(cfg, rng)).collect(),
            out: Linear::new(cfg.d_model, cfg.d_model, true, rng),
        }
    }

    pub fn forward(&self, h_e: &Array2<f64>) -> Result<(Array2<f64>, SequenceCache)> {
        let mut h = h_e.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, cache) = layer.block_forward(&h)?;
            h = y + h_e;
            caches.push(cache);
        }
        let out = self.out.forward(&h);
        Ok((out, SequenceCache { layers: caches, last: h }))
    }

    pub fn backward(&self, cache: &SequenceCache, grad_out: &Array2<f64>, grads: &mut SequenceEncoder) -> Array2<f64> {
        let mut g_h = self.out.backward(&cache.last, grad_out, &mut grads.out);
        let mut g_input = Array2::zeros(g_h.dim());
        for ((layer, c), g_layer) in self.layers.iter().zip(&cache.layers).zip(grads.layers.iter_mut()).rev() {
            g_input += &g_h;
            g_h = layer.block_backward(c, &g_h, g_layer);
        }
        g_input + g_h
    }
}
