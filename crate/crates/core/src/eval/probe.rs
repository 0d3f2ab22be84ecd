//! Few-shot linear probing with L2-regularized multinomial logistic regression.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lbfgs::minimize;
use super::metrics::{classification_metrics, Metrics};
use super::EvalDataset;
use crate::error::{Error, Result};

/// Relative-decrease stopping threshold of the solver.
const FTOL: f64 = 2.220446049250313e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Inverse regularization strength.
    pub c: f64,
    pub max_iter: u64,
    /// Stop once every gradient component is at most this in magnitude.
    pub tol: f64,
    pub shots: Vec<usize>,
    pub runs: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            c: 1.0,
            max_iter: 10_000,
            tol: 1e-4,
            shots: vec![5, 10, 25],
            runs: 10,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0) {
            return Err(Error::config("c", "must be positive"));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::config("shots", "need at least one k, each ≥ 1"));
        }
        if self.runs == 0 {
            return Err(Error::config("runs", "must be at least 1"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

/// `n / (n_present · count_c)`; zero for absent classes.
pub fn balanced_class_weights(labels: &[usize], n_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n_classes];
    for &y in labels {
        counts[y] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count() as f64;
    let n = labels.len() as f64;
    counts
        .iter()
        .map(|&c| if c == 0 { 0.0 } else { n / (present * c as f64) })
        .collect()
}

struct Objective<'a> {
    x: ArrayView2<'a, f64>,
    y: &'a [usize],
    sample_weight: Vec<f64>,
    n_classes: usize,
    c: f64,
}

impl Objective<'_> {
    fn unpack(&self, p: &[f64]) -> (Array2<f64>, Array1<f64>) {
        let (k, d) = (self.n_classes, self.x.ncols());
        let w = Array2::from_shape_vec((k, d), p[..k * d].to_vec()).expect("sized");
        let b = Array1::from_vec(p[k * d..].to_vec());
        (w, b)
    }

    /// Penalized loss and its gradient, flattened as `[W row-major, b]`.
    fn eval(&self, p: &[f64]) -> (f64, Vec<f64>) {
        let (w, b) = self.unpack(p);
        let logits = self.x.dot(&w.t()) + &b;
        let mut loss = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
        let mut g_logits = Array2::zeros(logits.dim());
        for (i, row) in logits.rows().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            let sw = self.sample_weight[i] * self.c;
            loss += sw * (lse - row[self.y[i]]);
            for (j, &v) in row.iter().enumerate() {
                g_logits[[i, j]] = sw * ((v - lse).exp() - f64::from(u8::from(j == self.y[i])));
            }
        }
        let gw = g_logits.t().dot(&self.x) + &w;
        let gb = g_logits.sum_axis(Axis(0));
        (loss, gw.iter().chain(gb.iter()).copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    /// `C × d`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub iterations: u64,
    pub converged: bool,
}

impl LogisticRegression {
    /// Minimizes `½‖W‖² + C Σ_i s_i CE_i` with balanced sample weights `s`;
    /// the bias is unpenalized.
    pub fn fit(x: ArrayView2<'_, f64>, y: &[usize], n_classes: usize, c: f64, max_iter: u64, tol: f64) -> Result<Self> {
        if x.nrows() != y.len() || y.is_empty() {
            return Err(Error::ShapeMismatch(format!("{} rows but {} labels", x.nrows(), y.len())));
        }
        let weights = balanced_class_weights(y, n_classes);
        let problem = Objective {
            x,
            y,
            sample_weight: y.iter().map(|&k| weights[k]).collect(),
            n_classes,
            c,
        };
        let init = vec![0.0; n_classes * (x.ncols() + 1)];
        let res = minimize(|p| problem.eval(p), init, max_iter, tol, FTOL, 10);
        if !res.f.is_finite() {
            return Err(Error::Divergence("logistic regression objective is not finite".into()));
        }
        let (best, iterations, converged) = (res.x, res.iterations, res.converged);
        let d = x.ncols();
        let weight = Array2::from_shape_vec((n_classes, d), best[..n_classes * d].to_vec()).expect("sized");
        let bias = Array1::from_vec(best[n_classes * d..].to_vec());
        Ok(LogisticRegression {
            weight,
            bias,
            iterations,
            converged,
        })
    }

    pub fn predict_proba(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut logits = x.dot(&self.weight.t()) + &self.bias;
        for mut row in logits.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let z = row.sum();
            row /= z;
        }
        logits
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRun {
    pub shots: usize,
    pub run: usize,
    pub metrics: Metrics,
}

/// For each `k` and run: fit on `k` random patients per class, score the rest.
pub fn linear_probe_fewshot(ds: &EvalDataset, cfg: &ProbeConfig) -> Result<Vec<ProbeRun>> {
    cfg.validate()?;
    let counts = ds.class_counts();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.n_classes];
    for (i, &y) in ds.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut out = Vec::new();
    for &k in &cfg.shots {
        for (class, &n) in counts.iter().enumerate() {
            if n > 0 && k > n {
                return Err(Error::InvalidInput(format!(
                    "k = {k} exceeds the {n} patients available for class {class}"
                )));
            }
        }
        for run in 0..cfg.runs {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream((k as u64) << 32 | run as u64);
            let mut train = Vec::new();
            for members in by_class.iter().filter(|m| !m.is_empty()) {
                let mut picked: Vec<usize> = sample(&mut rng, members.len(), k).into_iter().map(|j| members[j]).collect();
                picked.sort_unstable();
                train.extend(picked);
            }
            let test: Vec<usize> = (0..ds.len()).filter(|i| !train.contains(i)).collect();
            if test.is_empty() {
                return Err(Error::InvalidInput(format!("k = {k} leaves no patients to evaluate")));
            }
            let x_train = ds.embeddings.select(Axis(0), &train);
            let y_train: Vec<usize> = train.iter().map(|&i| ds.labels[i]).collect();
            let model = LogisticRegression::fit(x_train.view(), &y_train, ds.n_classes, cfg.c, cfg.max_iter, cfg.tol)?;
            let x_test = ds.embeddings.select(Axis(0), &test);
            let y_test: Vec<usize> = test.iter().map(|&i| ds.labels[i]).collect();
            let probs = model.predict_proba(x_test.view());
            out.push(ProbeRun {
                shots: k,
                run,
                metrics: classification_metrics(&y_test, &probs)?,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use ndarray::array;

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let x = array![[0.5, -1.0], [1.5, 0.2], [-0.3, 0.8], [0.1, 0.1]];
        let y = [0, 1, 2, 1];
        let obj = Objective {
            x: x.view(),
            y: &y,
            sample_weight: vec![1.0, 0.5, 2.0, 0.5],
            n_classes: 3,
            c: 1.0,
        };
        let p: Vec<f64> = (0..9).map(|i| 0.1 * i as f64 - 0.3).collect();
        let (_, g) = obj.eval(&p);
        let r = check_gradient(&p, &g, 1e-6, |q| obj.eval(q).0);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn balanced_weights_follow_counts() {
        assert_eq!(balanced_class_weights(&[0, 0, 0, 1], 2), vec![4.0 / 6.0, 2.0]);
    }
}
