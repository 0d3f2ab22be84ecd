//! Momentum contrastive pretraining.
//!
//! Two views of the same patient (independently drawn extractor,
//! magnification and tile subset) form a query/key pair. Queries pass
//! through the query encoder, a projection head and a prediction head; keys
//! through the momentum (key) encoder and its projection head, without
//! gradients. Both are L2-normalized and scored with InfoNCE against the
//! other keys of the batch. The key encoder follows the query encoder as an
//! exponential moving average.

mod optim;
mod trainer;

pub use optim::{one_cycle, warmup_cosine, AdamW, AdamWConfig};
pub use trainer::{metrics_csv, train, EpochMetrics, StepStats, TrainConfig, TrainOutcome, Trainer, METRICS_HEADER};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, SlideEncoder};
use crate::error::{Error, Result};
use crate::feature_store::{sample_view, FeatureStore, View};
use crate::impl_parameters;
use crate::nn::Mlp;
use crate::params::{zip_by_name, Parameters};

/// Allowed deviation of an input norm from 1 in [`info_nce`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub proj_hidden: usize,
    pub proj_dim: usize,
    pub pred_hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            proj_hidden: 512,
            proj_dim: 256,
            pred_hidden: 512,
        }
    }
}

impl HeadConfig {
    pub fn desk() -> Self {
        HeadConfig {
            proj_hidden: 128,
            proj_dim: 64,
            pred_hidden: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.proj_hidden == 0 || self.proj_dim == 0 || self.pred_hidden == 0 {
            return Err(Error::config("heads", "head widths must be positive"));
        }
        Ok(())
    }
}

/// Full scale by default; [`ModelConfig::desk`] for laptop runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub heads: HeadConfig,
}

impl ModelConfig {
    pub fn desk() -> Self {
        ModelConfig {
            encoder: EncoderConfig::desk(),
            heads: HeadConfig::desk(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.heads.validate()
    }
}

/// Query side: encoder, projection head and prediction head.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryModel {
    pub encoder: SlideEncoder,
    pub projector: Mlp,
    pub predictor: Mlp,
}
impl_parameters!(QueryModel { encoder, projector, predictor });

/// Key side: encoder and projection head, updated only by [`momentum_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct KeyModel {
    pub encoder: SlideEncoder,
    pub projector: Mlp,
}
impl_parameters!(KeyModel { encoder, projector });

impl QueryModel {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = SlideEncoder::new(cfg.encoder.clone(), rng)?;
        let h = cfg.heads;
        Ok(QueryModel {
            encoder,
            projector: Mlp::new(cfg.encoder.d_model, h.proj_hidden, h.proj_dim, rng),
            predictor: Mlp::new(h.proj_dim, h.pred_hidden, h.proj_dim, rng),
        })
    }

    /// Key model initialized as a copy of this model's encoder and projector.
    pub fn key_copy(&self) -> KeyModel {
        KeyModel {
            encoder: self.encoder.clone(),
            projector: self.projector.clone(),
        }
    }

    /// Unit-norm projected embeddings (no predictor), dropout off.
    pub fn project(&self, views: &[View]) -> Result<Array2<f64>> {
        project_with(&self.encoder, &self.projector, views)
    }
}

impl KeyModel {
    /// Unit-norm keys for a batch of views; no gradient is tracked.
    pub fn keys(&self, views: &[View]) -> Result<Array2<f64>> {
        project_with(&self.encoder, &self.projector, views)
    }
}

fn project_with(encoder: &SlideEncoder, projector: &Mlp, views: &[View]) -> Result<Array2<f64>> {
    let d = encoder.config.d_model;
    let mut z = Array2::zeros((views.len(), d));
    for (mut row, v) in z.rows_mut().into_iter().zip(views) {
        let (zi, _) = encoder.forward_train::<rand_chacha::ChaCha8Rng>(&v.extractor_id, &v.features, None)?;
        row.assign(&zi);
    }
    let (p, _) = projector.forward::<rand_chacha::ChaCha8Rng>(&z, 0.0, None);
    Ok(crate::nn::l2_normalize_rows(&p).0)
}

fn check_unit(v: ArrayView1<'_, f64>, what: &str) -> Result<()> {
    let n = v.dot(&v).sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOLERANCE || !n.is_finite() {
        return Err(Error::NotNormalized(format!("{what} has norm {n}")));
    }
    Ok(())
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// InfoNCE loss of one query against a set of keys whose `pos_index`-th
/// row is the positive: `-log(exp(q·k⁺/τ) / Σ_i exp(q·k_i/τ))`.
pub fn info_nce(q: ArrayView1<'_, f64>, keys: ArrayView2<'_, f64>, pos_index: usize, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::config("temperature", "must be positive"));
    }
    if pos_index >= keys.nrows() {
        return Err(Error::InvalidInput(format!(
            "positive index {pos_index} out of range for {} keys",
            keys.nrows()
        )));
    }
    if q.len() != keys.ncols() {
        return Err(Error::DimensionMismatch(format!("query dim {} vs key dim {}", q.len(), keys.ncols())));
    }
    check_unit(q, "query")?;
    for (i, k) in keys.rows().into_iter().enumerate() {
        check_unit(k, &format!("key {i}"))?;
    }
    let logits: Vec<f64> = keys.rows().into_iter().map(|k| q.dot(&k) / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pos = logits[pos_index];
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != pos_index)
        .map(|(_, &l)| (l - max).exp())
        .sum();
    // log1p keeps tiny-but-positive losses away from an exact zero
    Ok(if pos >= max {
        rest.ln_1p()
    } else {
        (max - pos) + ((pos - max).exp() + rest).ln()
    })
}

/// Mean InfoNCE over a batch where key `i` is the positive of query `i`,
/// with the gradient w.r.t. the queries.
pub fn info_nce_batch(queries: &Array2<f64>, keys: &Array2<f64>, temperature: f64) -> Result<(f64, Array2<f64>)> {
    if queries.dim() != keys.dim() {
        return Err(Error::DimensionMismatch("query and key batches differ in shape".into()));
    }
    let b = queries.nrows();
    let logits = queries.dot(&keys.t()) / temperature;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(queries.dim());
    for (i, row) in logits.rows().into_iter().enumerate() {
        let lse = log_sum_exp(row.iter().copied());
        loss += lse - row[i];
        let p = row.mapv(|l| (l - lse).exp());
        let mut g = keys.t().dot(&p);
        g -= &keys.row(i);
        grad.row_mut(i).assign(&(g / (temperature * b as f64)));
    }
    Ok((loss / b as f64, grad))
}

/// `θ_k ← m·θ_k + (1 − m)·θ_q` over every key tensor (the query-only
/// prediction head has no key counterpart).
pub fn momentum_update(key: &mut KeyModel, query: &QueryModel, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::config("momentum", "must lie in [0, 1]"));
    }
    zip_by_name(key, query, |mut k, q| {
        ndarray::Zip::from(&mut k).and(&q).for_each(|k, &q| *k = m * *k + (1.0 - m) * q);
    })
}

/// Two independent views of one patient.
pub fn make_pair<R: Rng + ?Sized>(store: &FeatureStore, patient_id: &str, rng: &mut R, max_tiles: usize) -> Result<(View, View)> {
    let a = sample_view(store, patient_id, rng, max_tiles)?;
    let b = sample_view(store, patient_id, rng, max_tiles)?;
    Ok((a, b))
}

/// Mean cosine between matching rows of two unit-norm batches.
pub fn alignment(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a * b).sum_axis(Axis(1)).mean().unwrap_or(0.0)
}

/// Mean cosine between non-matching rows (`i ≠ j`) of two unit-norm batches.
pub fn cross_similarity(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let sims = a.dot(&b.t());
    let n = sims.nrows();
    if n < 2 {
        return 0.0;
    }
    let total: f64 = sims.sum() - sims.diag().sum();
    total / (n * (n - 1)) as f64
}

/// `log mean_{i<j} exp(-2‖x_i − x_j‖²)`.
pub fn uniformity(x: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let mut terms = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d = &x.row(i) - &x.row(j);
            terms.push(-2.0 * d.dot(&d));
        }
    }
    if terms.is_empty() {
        return 0.0;
    }
    log_sum_exp(terms.iter().copied()) - (terms.len() as f64).ln()
}

pub(crate) fn zero_grads(model: &QueryModel) -> QueryModel {
    model.zeros_like()
}

pub(crate) fn stack_rows(rows: &[Array1<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut out = Array2::zeros((rows.len(), d));
    for (mut o, r) in out.rows_mut().into_iter().zip(rows) {
        o.assign(r);
    }
    out
}
