use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::impl_parameters;
use crate::nn::{dropout_mask, sigmoid, Linear};

/// One gated-attention head over a `d/M`-wide slice of the encoded tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    /// `p × d/M`, tanh branch
    pub v: Array2<f64>,
    /// `p × d/M`, sigmoid gate
    pub u: Array2<f64>,
    /// `p`
    pub w: Array1<f64>,
}
impl_parameters!(AttentionHead { v, u, w });

/// Multi-head gated attention pooling. Heads see contiguous chunks of the
/// feature vector; tile weights are the mean of the per-head softmaxes.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedAttention {
    pub heads: Vec<AttentionHead>,
}
impl_parameters!(GatedAttention { heads });

/// Pooling weights: `per_head` is `M × N_t`, `combined` its column mean.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub combined: Array1<f64>,
    pub per_head: Array2<f64>,
}

impl AttentionWeights {
    pub fn n_tiles(&self) -> usize {
        self.combined.len()
    }
}

#[derive(Debug, Clone)]
pub struct AttentionCache {
    tanh: Vec<Array2<f64>>,
    gate: Vec<Array2<f64>>,
    gated: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

impl GatedAttention {
    pub fn new<R: Rng + ?Sized>(d: usize, n_heads: usize, attn_dim: usize, rng: &mut R) -> Result<Self> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::config(
                "attention.heads",
                format!("embedding dim {d} not divisible by {n_heads} heads"),
            ));
        }
        if attn_dim == 0 {
            return Err(Error::config("attention.attn_dim", "must be positive"));
        }
        let dh = d / n_heads;
        let heads = (0..n_heads)
            .map(|_| AttentionHead {
                v: Linear::new(dh, attn_dim, false, rng).weight,
                u: Linear::new(dh, attn_dim, false, rng).weight,
                w: Linear::new(attn_dim, 1, false, rng).weight.row(0).to_owned(),
            })
            .collect();
        Ok(GatedAttention { heads })
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    fn head_width(&self) -> usize {
        self.heads[0].v.ncols()
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        h_s: &Array2<f64>,
        dropout: f64,
        mut rng: Option<&mut R>,
    ) -> Result<(AttentionWeights, AttentionCache)> {
        let dh = self.head_width();
        if h_s.ncols() != dh * self.n_heads() {
            return Err(Error::DimensionMismatch(format!(
                "attention expects {} features, got {}",
                dh * self.n_heads(),
                h_s.ncols()
            )));
        }
        let n = h_s.nrows();
        let mut per_head = Array2::zeros((self.n_heads(), n));
        let mut cache = AttentionCache {
            tanh: Vec::new(),
            gate: Vec::new(),
            gated: Vec::new(),
            masks: Vec::new(),
        };
        for (m, head) in self.heads.iter().enumerate() {
            let x = h_s.slice(s![.., m * dh..(m + 1) * dh]);
            let t = x.dot(&head.v.t()).mapv(f64::tanh);
            let g = x.dot(&head.u.t()).mapv(sigmoid);
            let mut gated = &t * &g;
            let mask = dropout_mask(gated.dim(), dropout, rng.as_deref_mut());
            if let Some(mk) = &mask {
                gated *= mk;
            }
            let logits = gated.dot(&head.w);
            per_head.row_mut(m).assign(&softmax(&logits));
            cache.tanh.push(t);
            cache.gate.push(g);
            cache.gated.push(gated);
            cache.masks.push(mask);
        }
        let combined = per_head.mean_axis(Axis(0)).expect("at least one head");
        Ok((AttentionWeights { combined, per_head }, cache))
    }

    /// Back-propagates a gradient w.r.t. the combined weights.
    pub fn backward(
        &self,
        h_s: &Array2<f64>,
        weights: &AttentionWeights,
        cache: &AttentionCache,
        grad_weights: &Array1<f64>,
        grads: &mut GatedAttention,
    ) -> Array2<f64> {
        let dh = self.head_width();
        let m_heads = self.n_heads() as f64;
        let mut g_hs = Array2::zeros(h_s.dim());
        for (m, head) in self.heads.iter().enumerate() {
            let a = weights.per_head.row(m);
            let g_a = grad_weights / m_heads;
            let dot = a.dot(&g_a);
            let g_logits = Zip::from(&a).and(&g_a).map_collect(|&ai, &gi| ai * (gi - dot));
            let gh = &mut grads.heads[m];
            gh.w += &cache.gated[m].t().dot(&g_logits);
            let mut g_gated = Array2::zeros(cache.gated[m].dim());
            for (mut row, &gl) in g_gated.rows_mut().into_iter().zip(g_logits.iter()) {
                row.assign(&(&head.w * gl));
            }
            if let Some(mk) = &cache.masks[m] {
                g_gated *= mk;
            }
            let t = &cache.tanh[m];
            let g = &cache.gate[m];
            let g_tpre = Zip::from(&g_gated).and(t).and(g).map_collect(|&gg, &tv, &gv| gg * gv * (1.0 - tv * tv));
            let g_gpre = Zip::from(&g_gated).and(t).and(g).map_collect(|&gg, &tv, &gv| gg * tv * gv * (1.0 - gv));
            let x = h_s.slice(s![.., m * dh..(m + 1) * dh]);
            gh.v += &g_tpre.t().dot(&x);
            gh.u += &g_gpre.t().dot(&x);
            let mut gx = g_hs.slice_mut(s![.., m * dh..(m + 1) * dh]);
            gx += &g_tpre.dot(&head.v);
            gx += &g_gpre.dot(&head.u);
        }
        g_hs
    }
}

/// `Σ_k a_k · rows_k`, the attention-weighted average of the rows.
pub fn weighted_sum(weights: &Array1<f64>, rows: &Array2<f64>) -> Result<Array1<f64>> {
    if weights.len() != rows.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} weights for {} tiles",
            weights.len(),
            rows.nrows()
        )));
    }
    Ok(rows.t().dot(weights))
}
