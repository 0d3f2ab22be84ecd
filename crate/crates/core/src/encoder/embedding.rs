use ndarray::Array2;
use rand::Rng;

use crate::impl_parameters;
use crate::nn::{LayerNorm, LayerNormCache, Mlp, MlpCache};

/// Per-extractor embedding module `Lin(SiLU(Lin(LN(H))))`, mapping `d_n` to
/// the shared width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMlp {
    pub norm: LayerNorm,
    pub mlp: Mlp,
}
impl_parameters!(EmbeddingMlp { norm, mlp });

#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    norm: LayerNormCache,
    mlp: MlpCache,
}

impl EmbeddingMlp {
    pub fn new<R: Rng + ?Sized>(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        EmbeddingMlp {
            norm: LayerNorm::new(d_in),
            mlp: Mlp::new(d_in, d_hidden, d_out, rng),
        }
    }

    pub fn d_in(&self) -> usize {
        self.norm.dim()
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: &Array2<f64>, dropout: f64, rng: Option<&mut R>) -> (Array2<f64>, EmbeddingCache) {
        let (h, norm) = self.norm.forward(x);
        let (y, mlp) = self.mlp.forward(&h, dropout, rng);
        (y, EmbeddingCache { norm, mlp })
    }

    pub fn backward(&self, cache: &EmbeddingCache, grad_out: &Array2<f64>, grads: &mut EmbeddingMlp) -> Array2<f64> {
        let g = self.mlp.backward(&cache.mlp, grad_out, &mut grads.mlp);
        self.norm.backward(&cache.norm, &g, &mut grads.norm)
    }
}
