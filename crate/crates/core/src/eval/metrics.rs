//! Classification metrics over per-class scores.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub auroc: f64,
    pub auprc: f64,
    pub f1: f64,
    pub balanced_accuracy: f64,
    pub accuracy: f64,
}

impl Metrics {
    pub const NAMES: [&'static str; 5] = ["auroc", "auprc", "f1", "balanced_accuracy", "accuracy"];

    pub fn values(&self) -> [f64; 5] {
        [self.auroc, self.auprc, self.f1, self.balanced_accuracy, self.accuracy]
    }
}

fn check_binary(labels: &[bool], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(Error::InvalidInput(format!(
            "{} labels but {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("score {i} is not finite")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput("both classes must be present".into()));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve as the Mann-Whitney statistic with midranks,
/// so tied scores earn half credit.
pub fn auroc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check_binary(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// Average precision: `Σ (R_n − R_{n−1}) P_n` over distinct score thresholds.
pub fn auprc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, _) = check_binary(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

pub fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Metrics from an `n × C` score matrix. Binary tasks score class 1;
/// multiclass AUROC, AUPRC and F1 are one-vs-rest macro averages over the
/// classes present in `y_true`.
pub fn classification_metrics(y_true: &[usize], scores: &Array2<f64>) -> Result<Metrics> {
    let (n, c) = scores.dim();
    if y_true.len() != n {
        return Err(Error::InvalidInput(format!("{} labels but {n} score rows", y_true.len())));
    }
    if c < 2 {
        return Err(Error::InvalidInput("need at least 2 classes".into()));
    }
    if let Some(&bad) = y_true.iter().find(|&&y| y >= c) {
        return Err(Error::InvalidInput(format!("label {bad} outside 0..{c}")));
    }
    let pred: Vec<usize> = scores.rows().into_iter().map(argmax).collect();
    let present: Vec<usize> = (0..c).filter(|k| y_true.contains(k)).collect();
    if present.len() < 2 {
        return Err(Error::InvalidInput("need at least 2 classes present in y_true".into()));
    }
    let one_vs_rest = |k: usize| -> Result<(f64, f64)> {
        let labels: Vec<bool> = y_true.iter().map(|&y| y == k).collect();
        let col = scores.column(k).to_vec();
        Ok((auroc(&labels, &col)?, auprc(&labels, &col)?))
    };
    let f1_of = |k: usize| {
        let tp = (0..n).filter(|&i| pred[i] == k && y_true[i] == k).count() as f64;
        let fp = (0..n).filter(|&i| pred[i] == k && y_true[i] != k).count() as f64;
        let fneg = (0..n).filter(|&i| pred[i] != k && y_true[i] == k).count() as f64;
        if tp == 0.0 {
            0.0
        } else {
            2.0 * tp / (2.0 * tp + fp + fneg)
        }
    };
    let (auroc_v, auprc_v, f1_v) = if c == 2 {
        let (a, p) = one_vs_rest(1)?;
        (a, p, f1_of(1))
    } else {
        let mut acc = (0.0, 0.0, 0.0);
        for &k in &present {
            let (a, p) = one_vs_rest(k)?;
            acc.0 += a;
            acc.1 += p;
            acc.2 += f1_of(k);
        }
        let m = present.len() as f64;
        (acc.0 / m, acc.1 / m, acc.2 / m)
    };
    let balanced = present
        .iter()
        .map(|&k| {
            let members: Vec<usize> = (0..n).filter(|&i| y_true[i] == k).collect();
            members.iter().filter(|&&i| pred[i] == k).count() as f64 / members.len() as f64
        })
        .sum::<f64>()
        / present.len() as f64;
    let accuracy = (0..n).filter(|&i| pred[i] == y_true[i]).count() as f64 / n as f64;
    Ok(Metrics {
        auroc: auroc_v,
        auprc: auprc_v,
        f1: f1_v,
        balanced_accuracy: balanced,
        accuracy,
    })
}
