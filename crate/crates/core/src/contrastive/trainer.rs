use std::fs;
use std::path::Path;

use ndarray::{concatenate, s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    alignment, info_nce_batch, make_pair, momentum_update, stack_rows, uniformity, warmup_cosine, zero_grads, AdamW,
    AdamWConfig, KeyModel, ModelConfig, QueryModel,
};
use crate::checkpoint::{save_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::feature_store::{FeatureStore, View, DEFAULT_MAX_TILES};
use crate::nn::{l2_normalize_rows, l2_normalize_rows_backward};
use crate::params::Parameters;

pub const METRICS_HEADER: &str = "epoch,step,loss,alignment,uniformity,lr";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub temperature: f64,
    pub max_tiles_per_view: usize,
    /// Average the q→k and k→q directions.
    pub symmetric: bool,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many epochs (0 = final only).
    pub checkpoint_every: usize,
    pub adam: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1024,
            epochs: 2000,
            lr: 5e-4,
            weight_decay: 0.1,
            warmup_epochs: 50.0,
            momentum: 0.99,
            temperature: 0.2,
            max_tiles_per_view: DEFAULT_MAX_TILES,
            symmetric: true,
            seed: 0,
            checkpoint_every: 0,
            adam: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Laptop-scale schedule: batch 32 for 200 epochs, other settings as default.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 200,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "batch ≥ 2 required for negatives"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if !(self.warmup_epochs >= 0.0) || self.warmup_epochs > self.epochs as f64 {
            return Err(Error::config("warmup_epochs", "must lie in [0, epochs]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive"));
        }
        if self.max_tiles_per_view == 0 {
            return Err(Error::config("max_tiles_per_view", "must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate at a (fractional) epoch.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        if self.warmup_epochs == 0.0 && epoch == 0.0 {
            return self.lr;
        }
        warmup_cosine(epoch, self.lr, self.warmup_epochs, self.epochs as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub lr: f64,
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub loss: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.step, self.loss, self.alignment, self.uniformity, self.lr
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Owns the query/key models, optimizer state and sampling RNG.
pub struct Trainer<'s> {
    store: &'s FeatureStore,
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    query: QueryModel,
    key: KeyModel,
    opt: AdamW<QueryModel>,
    rng: ChaCha8Rng,
    steps: u64,
    momentum: f64,
}

impl<'s> Trainer<'s> {
    /// Builds models from `model_cfg`; an empty extractor registry is filled
    /// from the corpus manifest.
    pub fn new(store: &'s FeatureStore, cfg: TrainConfig, mut model_cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        if store.manifest().patients.len() < 2 {
            return Err(Error::InvalidInput("pretraining needs at least 2 patients".into()));
        }
        if model_cfg.encoder.extractors.is_empty() {
            model_cfg.encoder.extractors = store.manifest().extractors.clone();
        }
        for e in &store.manifest().extractors {
            if !model_cfg.encoder.extractors.contains(e) {
                return Err(Error::config(
                    "model.extractors",
                    format!("corpus extractor `{}` missing from the model registry", e.id),
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let query = QueryModel::new(&model_cfg, &mut rng)?;
        let key = query.key_copy();
        let opt = AdamW::new(&query, cfg.adam, cfg.weight_decay);
        let momentum = cfg.momentum;
        Ok(Trainer {
            store,
            cfg,
            model_cfg,
            query,
            key,
            opt,
            rng,
            steps: 0,
            momentum,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model_cfg
    }

    pub fn query(&self) -> &QueryModel {
        &self.query
    }

    pub fn key(&self) -> &KeyModel {
        &self.key
    }

    /// Direct access to the key model, e.g. to start from a perturbed copy.
    pub fn key_mut(&mut self) -> &mut KeyModel {
        &mut self.key
    }

    /// Overrides the EMA coefficient; `1.0` freezes the key encoder, which
    /// the config validation otherwise rejects. Used for control runs.
    pub fn set_momentum(&mut self, m: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::config("momentum", "must lie in [0, 1]"));
        }
        self.momentum = m;
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn into_models(self) -> (QueryModel, KeyModel) {
        (self.query, self.key)
    }

    /// Patient batches for one epoch: shuffled, chunked, with a trailing
    /// singleton folded into the previous batch.
    fn epoch_batches(&mut self) -> Vec<Vec<String>> {
        let mut ids: Vec<String> = self.store.patient_ids().into_iter().map(str::to_string).collect();
        ids.shuffle(&mut self.rng);
        let mut batches: Vec<Vec<String>> = ids.chunks(self.cfg.batch_size).map(<[String]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
            let tail = batches.pop().expect("non-empty");
            batches.last_mut().expect("non-empty").extend(tail);
        }
        batches
    }

    pub fn steps_per_epoch(&self) -> usize {
        let n = self.store.manifest().patients.len();
        let full = n.div_ceil(self.cfg.batch_size);
        if full > 1 && n % self.cfg.batch_size == 1 {
            full - 1
        } else {
            full
        }
    }

    /// One optimizer step on the given patients.
    pub fn step(&mut self, patient_ids: &[String], lr: f64) -> Result<StepStats> {
        let b = patient_ids.len();
        if b < 2 {
            return Err(Error::InvalidInput("a step needs at least 2 patients".into()));
        }
        let mut first = Vec::with_capacity(b);
        let mut second = Vec::with_capacity(b);
        for id in patient_ids {
            let (v1, v2) = make_pair(self.store, id, &mut self.rng, self.cfg.max_tiles_per_view)?;
            first.push(v1);
            second.push(v2);
        }
        let views: Vec<View> = first.into_iter().chain(second).collect();

        let mut caches = Vec::with_capacity(views.len());
        let mut zs = Vec::with_capacity(views.len());
        for v in &views {
            let (z, cache) = self
                .query
                .encoder
                .forward_train(&v.extractor_id, &v.features, Some(&mut self.rng))
                .map_err(|e| diverged(e, self.steps + 1))?;
            zs.push(z);
            caches.push(cache);
        }
        let z = stack_rows(&zs);
        let (proj, proj_cache) = self.query.projector.forward::<ChaCha8Rng>(&z, 0.0, None);
        let (pred, pred_cache) = self.query.predictor.forward::<ChaCha8Rng>(&proj, 0.0, None);
        let (q, q_norms) = l2_normalize_rows(&pred);
        let k = self.key.keys(&views).map_err(|e| diverged(e, self.steps + 1))?;
        if q.iter().chain(k.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!("non-finite projection at step {}", self.steps + 1)));
        }

        let (q1, q2) = (q.slice(s![..b, ..]).to_owned(), q.slice(s![b.., ..]).to_owned());
        let (k1, k2) = (k.slice(s![..b, ..]).to_owned(), k.slice(s![b.., ..]).to_owned());
        let tau = self.cfg.temperature;
        let (loss, g_q, align) = if self.cfg.symmetric {
            let (l1, g1) = info_nce_batch(&q1, &k2, tau)?;
            let (l2, g2) = info_nce_batch(&q2, &k1, tau)?;
            let g = concatenate(Axis(0), &[(g1 * 0.5).view(), (g2 * 0.5).view()]).expect("same width");
            (0.5 * (l1 + l2), g, 0.5 * (alignment(&q1, &k2) + alignment(&q2, &k1)))
        } else {
            let (l1, g1) = info_nce_batch(&q1, &k2, tau)?;
            let g = concatenate(Axis(0), &[g1.view(), Array2::zeros(g1.dim()).view()]).expect("same width");
            (l1, g, alignment(&q1, &k2))
        };
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss is {loss} at step {}", self.steps + 1)));
        }

        let mut grads = zero_grads(&self.query);
        let g_pred = l2_normalize_rows_backward(&q, &q_norms, &g_q);
        let g_proj = self.query.predictor.backward(&pred_cache, &g_pred, &mut grads.predictor);
        let g_z = self.query.projector.backward(&proj_cache, &g_proj, &mut grads.projector);
        for (cache, gz) in caches.iter().zip(g_z.rows()) {
            self.query.encoder.backward(cache, &gz.to_owned(), &mut grads.encoder);
        }

        self.opt.step(&mut self.query, &grads, lr);
        if !self.query.all_finite() {
            return Err(Error::Divergence(format!("non-finite parameter after step {}", self.steps + 1)));
        }
        momentum_update(&mut self.key, &self.query, self.momentum)?;
        self.steps += 1;
        Ok(StepStats {
            loss,
            alignment: align,
            uniformity: uniformity(&k),
            lr,
        })
    }

    pub fn run_epoch(&mut self, epoch: usize) -> Result<EpochMetrics> {
        let batches = self.epoch_batches();
        let n = batches.len() as f64;
        let mut acc = EpochMetrics {
            epoch,
            step: 0,
            loss: 0.0,
            alignment: 0.0,
            uniformity: 0.0,
            lr: 0.0,
        };
        for (i, batch) in batches.iter().enumerate() {
            let lr = self.cfg.lr_at(epoch as f64 + i as f64 / n);
            let s = self.step(batch, lr)?;
            acc.loss += s.loss / n;
            acc.alignment += s.alignment / n;
            acc.uniformity += s.uniformity / n;
            acc.lr = lr;
        }
        acc.step = self.steps;
        Ok(acc)
    }
}

/// Corpus features are checked on load, so non-finite activations inside
/// the network mean the parameters blew up.
fn diverged(e: Error, step: u64) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence(format!("non-finite activation at step {step}")),
        other => other,
    }
}

pub struct TrainOutcome {
    pub query: QueryModel,
    pub key: KeyModel,
    pub model_config: ModelConfig,
    pub metrics: Vec<EpochMetrics>,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }
}

/// Full pretraining run. With `out_dir`, writes `metrics.csv` (appended
/// after each epoch) and checkpoints there.
pub fn train(store: &FeatureStore, cfg: &TrainConfig, model_cfg: &ModelConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(store, cfg.clone(), model_cfg.clone())?;
    let metrics_path = out_dir.map(|d| d.join("metrics.csv"));
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = String::from(METRICS_HEADER);
    log.push('\n');
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let m = trainer.run_epoch(epoch)?;
        log.push_str(&m.csv_row());
        log.push('\n');
        metrics.push(m);
        if let Some(path) = &metrics_path {
            fs::write(path, &log).map_err(|e| Error::io(path, e))?;
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs {
                let meta = CheckpointMeta {
                    seed: cfg.seed,
                    epoch: epoch + 1,
                };
                save_checkpoint(&dir.join(format!("checkpoint_epoch{:05}.ckpt", epoch + 1)), trainer.query(), trainer.key(), trainer.model_config(), meta)?;
            }
        }
    }
    let model_config = trainer.model_config().clone();
    if let Some(dir) = out_dir {
        let meta = CheckpointMeta {
            seed: cfg.seed,
            epoch: cfg.epochs,
        };
        save_checkpoint(&dir.join("checkpoint.ckpt"), trainer.query(), trainer.key(), &model_config, meta)?;
    }
    let (query, key) = trainer.into_models();
    Ok(TrainOutcome {
        query,
        key,
        model_config,
        metrics,
    })
}
