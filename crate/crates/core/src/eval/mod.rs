//! Downstream evaluation: patient embeddings, an MLP cross-validation
//! protocol, few-shot linear probes, and result tables.

mod lbfgs;
mod metrics;
mod mlp;
mod probe;

pub use metrics::{argmax, auprc, auroc, classification_metrics, Metrics};
pub use mlp::{mlp_cv, FoldResult, MlpCvReport, MlpEvalConfig};
pub use probe::{balanced_class_weights, linear_probe_fewshot, LogisticRegression, ProbeConfig, ProbeRun};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{InferenceMode, SlideEncoder};
use crate::error::{Error, Result};
use crate::feature_store::FeatureStore;

/// One embedding per patient with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalDataset {
    pub patient_ids: Vec<String>,
    pub embeddings: Array2<f64>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl EvalDataset {
    pub fn new(patient_ids: Vec<String>, embeddings: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        let n = patient_ids.len();
        if embeddings.nrows() != n || labels.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} patients, {} embeddings, {} labels",
                embeddings.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= n_classes) {
            return Err(Error::InvalidInput(format!("label {bad} outside 0..{n_classes}")));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embeddings contain non-finite values".into()));
        }
        Ok(EvalDataset {
            patient_ids,
            embeddings,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Rows `idx` as a new dataset.
    pub fn subset(&self, idx: &[usize]) -> EvalDataset {
        EvalDataset {
            patient_ids: idx.iter().map(|&i| self.patient_ids[i].clone()).collect(),
            embeddings: self.embeddings.select(ndarray::Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }
}

/// Which inference path produces the embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSpec {
    pub mode: InferenceMode,
    pub payload_extractor: String,
    pub magnification: f64,
}

/// Encodes every patient in the corpus (dropout off). `COMBINED_FM` uses all
/// of the corpus's extractors at the chosen magnification.
pub fn extract_embeddings(store: &FeatureStore, encoder: &SlideEncoder, spec: &EmbeddingSpec) -> Result<EvalDataset> {
    let manifest = store.manifest();
    manifest.extractor(&spec.payload_extractor)?;
    manifest.magnification_index(spec.magnification)?;
    let mut rows = Vec::with_capacity(manifest.patients.len());
    for p in &manifest.patients {
        let (emb, _) = match spec.mode {
            InferenceMode::Enc | InferenceMode::SingleFm => {
                let bag = store.pooled_bag(&p.patient_id, &spec.payload_extractor, spec.magnification)?;
                encoder.infer(&bag, spec.mode)?
            }
            InferenceMode::CombinedFm => {
                let bags = manifest
                    .extractors
                    .iter()
                    .map(|e| store.pooled_bag(&p.patient_id, &e.id, spec.magnification))
                    .collect::<Result<Vec<_>>>()?;
                encoder.encode_combined(&bags, &spec.payload_extractor)?
            }
        };
        rows.push(emb.z);
    }
    let d = rows.first().map_or(0, |r| r.len());
    let mut embeddings = Array2::zeros((rows.len(), d));
    for (mut dst, r) in embeddings.rows_mut().into_iter().zip(&rows) {
        dst.assign(r);
    }
    let labels: Vec<usize> = manifest.patients.iter().map(|p| p.class_label).collect();
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    EvalDataset::new(
        manifest.patients.iter().map(|p| p.patient_id.clone()).collect(),
        embeddings,
        labels,
        n_classes,
    )
}

/// Stratified fold assignment: each class is shuffled and dealt round-robin,
/// continuing the deal across classes so fold sizes stay balanced.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::config("folds", "need at least 2 folds"));
    }
    if labels.len() < k {
        return Err(Error::Stratification(format!("{} patients cannot fill {k} folds", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(folds)
}

/// One long-format result row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: String,
    pub mode: String,
    pub fold_or_run: String,
    pub metric: String,
    pub value: f64,
}

pub const EVAL_CSV_HEADER: &str = "task,mode,fold_or_run,metric,value";

pub fn metric_records(task: &str, mode: &str, fold_or_run: &str, m: &Metrics) -> Vec<EvalRecord> {
    Metrics::NAMES
        .iter()
        .zip(m.values())
        .map(|(name, value)| EvalRecord {
            task: task.to_string(),
            mode: mode.to_string(),
            fold_or_run: fold_or_run.to_string(),
            metric: name.to_string(),
            value,
        })
        .collect()
}

pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(EVAL_CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{},{},{},{},{}", r.task, r.mode, r.fold_or_run, r.metric, r.value);
    }
    out
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `mean ± std` per (task, mode, metric), in first-seen order.
pub fn summary_table(records: &[EvalRecord]) -> String {
    let mut keys: Vec<(String, String, String)> = Vec::new();
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for r in records {
        let key = (r.task.clone(), r.mode.clone(), r.metric.clone());
        if !groups.contains_key(&key) {
            keys.push(key.clone());
        }
        groups.entry(key).or_default().push(r.value);
    }
    let mut out = format!("{:<24} {:<12} {:<18} {}\n", "task", "mode", "metric", "mean ± std");
    for key in keys {
        let (m, s) = mean_std(&groups[&key]);
        let _ = writeln!(out, "{:<24} {:<12} {:<18} {m:.4} ± {s:.4}", key.0, key.1, key.2);
    }
    out
}
