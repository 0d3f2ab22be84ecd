//! MLP classifier trained per cross-validation fold.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{classification_metrics, Metrics};
use super::probe::balanced_class_weights;
use super::{stratified_folds, EvalDataset};
use crate::contrastive::{one_cycle, AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::nn::{Mlp, MlpCache};
use crate::params::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpEvalConfig {
    pub hidden: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub folds: usize,
    pub pct_start: f64,
    pub seed: u64,
}

impl Default for MlpEvalConfig {
    fn default() -> Self {
        MlpEvalConfig {
            hidden: 256,
            dropout: 0.25,
            lr: 1e-4,
            weight_decay: 0.01,
            epochs: 32,
            batch_size: 8,
            patience: 8,
            folds: 5,
            pct_start: 0.3,
            seed: 0,
        }
    }
}

impl MlpEvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.hidden == 0 || self.batch_size == 0 {
            return Err(Error::config("hidden", "hidden width and batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.pct_start) {
            return Err(Error::config("pct_start", "must lie in [0, 1]"));
        }
        if self.folds < 2 {
            return Err(Error::config("folds", "need at least 2 folds"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    /// On the external set when one is given, else on the validation fold.
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpCvReport {
    pub folds: Vec<FoldResult>,
}

impl MlpCvReport {
    pub fn metric_values(&self, f: impl Fn(&Metrics) -> f64) -> Vec<f64> {
        self.folds.iter().map(|r| f(&r.metrics)).collect()
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
    p
}

/// Class-weighted cross-entropy normalized by the summed weights, and its
/// gradient with respect to the logits.
fn weighted_ce(logits: &Array2<f64>, y: &[usize], class_weight: &[f64]) -> (f64, Array2<f64>) {
    let p = softmax_rows(logits);
    let total: f64 = y.iter().map(|&k| class_weight[k]).sum();
    let mut loss = 0.0;
    let mut grad = p.clone();
    for (i, &k) in y.iter().enumerate() {
        let w = class_weight[k] / total;
        loss -= w * p[[i, k]].max(f64::MIN_POSITIVE).ln();
        grad[[i, k]] -= 1.0;
        grad.row_mut(i).mapv_inplace(|g| g * w);
    }
    (loss, grad)
}

fn predict(model: &Mlp, x: &Array2<f64>) -> Array2<f64> {
    let (logits, _): (Array2<f64>, MlpCache) = model.forward::<ChaCha8Rng>(x, 0.0, None);
    softmax_rows(&logits)
}

fn train_fold(
    train: &EvalDataset,
    val: &EvalDataset,
    cfg: &MlpEvalConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Mlp, usize, f64, usize)> {
    let class_weight = balanced_class_weights(&train.labels, train.n_classes);
    let mut model = Mlp::new(train.dim(), cfg.hidden, train.n_classes, rng);
    let mut opt = AdamW::new(&model, AdamWConfig::default(), cfg.weight_decay);
    let steps_per_epoch = train.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut since_best = 0;
    let mut step = 0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = train.embeddings.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (logits, cache) = model.forward(&x, cfg.dropout, Some(&mut *rng));
            let (loss, g) = weighted_ce(&logits, &y, &class_weight);
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("classifier loss is {loss} at epoch {epoch}")));
            }
            let mut grads = model.zeros_like();
            model.backward(&cache, &g, &mut grads);
            opt.step(&mut model, &grads, one_cycle(step, total_steps, cfg.lr, cfg.pct_start));
            step += 1;
        }
        epochs_run = epoch;
        let (val_logits, _) = model.forward::<ChaCha8Rng>(&val.embeddings, 0.0, None);
        let (val_loss, _) = weighted_ce(&val_logits, &val.labels, &class_weight);
        if val_loss < best.2 {
            best = (model.clone(), epoch, val_loss);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.0, best.1, best.2, epochs_run))
}

/// Stratified k-fold training with early stopping on validation loss and
/// best-state restore; each fold's classifier is scored on `external` when
/// given.
pub fn mlp_cv(dataset: &EvalDataset, external: Option<&EvalDataset>, cfg: &MlpEvalConfig) -> Result<MlpCvReport> {
    cfg.validate()?;
    if let Some(ext) = external {
        if ext.dim() != dataset.dim() || ext.n_classes != dataset.n_classes {
            return Err(Error::DimensionMismatch(format!(
                "external set has dim {} and {} classes, training set {} and {}",
                ext.dim(),
                ext.n_classes,
                dataset.dim(),
                dataset.n_classes
            )));
        }
    }
    let folds = stratified_folds(&dataset.labels, cfg.folds, cfg.seed)?;
    let counts = dataset.class_counts();
    let mut results = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let train_idx: Vec<usize> = (0..dataset.len()).filter(|&i| folds[i] != fold).collect();
        let val_idx: Vec<usize> = (0..dataset.len()).filter(|&i| folds[i] == fold).collect();
        let train = dataset.subset(&train_idx);
        let val = dataset.subset(&val_idx);
        for (class, &n) in counts.iter().enumerate() {
            if n > 0 && !train.labels.contains(&class) {
                return Err(Error::Stratification(format!(
                    "class {class} is absent from the training split of fold {fold}"
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(fold as u64 + 1);
        let (model, best_epoch, best_val_loss, epochs_run) = train_fold(&train, &val, cfg, &mut rng)?;
        let target = external.unwrap_or(&val);
        let probs = predict(&model, &target.embeddings);
        results.push(FoldResult {
            fold,
            best_epoch,
            best_val_loss,
            epochs_run,
            metrics: classification_metrics(&target.labels, &probs)?,
        });
    }
    Ok(MlpCvReport { folds: results })
}
