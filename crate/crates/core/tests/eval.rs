use cobra_core::contrastive::info_nce;
use cobra_core::eval::*;
use cobra_core::gradcheck::numeric_gradient;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn pair_count_auroc(labels: &[bool], scores: &[f64]) -> f64 {
    let (mut credit, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    credit += 1.0;
                } else if scores[i] == scores[j] {
                    credit += 0.5;
                }
            }
        }
    }
    credit / pairs
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn auroc_equals_pair_counting(
        data in (2usize..=200).prop_flat_map(|n| (
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(0u8..20, n),
        )),
    ) {
        let (mut labels, raw) = data;
        labels[0] = true;
        labels[1] = false;
        // coarse integer scores force ties
        let scores: Vec<f64> = raw.iter().map(|&s| f64::from(s) * 0.25).collect();
        prop_assert_eq!(auroc(&labels, &scores).unwrap(), pair_count_auroc(&labels, &scores));
    }
}

#[test]
fn one_inversion_in_six() {
    let labels = [false, false, false, true, true, true];
    let scores = [0.1, 0.2, 0.7, 0.6, 0.8, 0.9];
    assert_eq!(auroc(&labels, &scores).unwrap(), 8.0 / 9.0);
    assert_eq!(pair_count_auroc(&labels, &scores), 8.0 / 9.0);
}

#[test]
fn perfect_ranking_has_unit_auprc() {
    let labels = [false, true, false, true];
    let scores = [0.1, 0.9, 0.2, 0.8];
    assert_eq!(auroc(&labels, &scores).unwrap(), 1.0);
    assert_eq!(auprc(&labels, &scores).unwrap(), 1.0);
    let reversed: Vec<f64> = scores.iter().map(|s| -s).collect();
    assert_eq!(auroc(&labels, &reversed).unwrap(), 0.0);
}

#[test]
fn info_nce_closed_form() {
    let q = array![1.0, 0.0];
    let keys = array![[1.0, 0.0], [0.0, 1.0]];
    let loss = info_nce(q.view(), keys.view(), 0, 0.2).unwrap();
    assert!((loss - (1.0 + (-5.0f64).exp()).ln()).abs() <= 1e-9);
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal))
}

/// Classes spaced `sep` standard deviations apart along the first axis.
fn separable(n_per_class: &[usize], dim: usize, sep: f64, seed: u64) -> EvalDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = n_per_class.iter().sum();
    let mut x = gaussian(&mut rng, n, dim);
    let mut labels = Vec::with_capacity(n);
    for (c, &count) in n_per_class.iter().enumerate() {
        for _ in 0..count {
            x[[labels.len(), c % dim]] += sep;
            labels.push(c);
        }
    }
    let ids = (0..n).map(|i| format!("p{i:03}")).collect();
    EvalDataset::new(ids, x, labels, n_per_class.len()).unwrap()
}

fn small_mlp() -> MlpEvalConfig {
    MlpEvalConfig {
        hidden: 32,
        lr: 1e-3,
        ..Default::default()
    }
}

#[test]
fn mlp_separates_well_spaced_classes() {
    let ds = separable(&[60, 60], 16, 8.0, 1);
    let report = mlp_cv(&ds, None, &small_mlp()).unwrap();
    assert_eq!(report.folds.len(), 5);
    let (mean, _) = mean_std(&report.metric_values(|m| m.auroc));
    assert!(mean >= 0.99, "auroc {mean}");
}

#[test]
fn mlp_on_shuffled_labels_is_at_chance() {
    let mut ds = separable(&[100, 100], 16, 0.0, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for y in ds.labels.iter_mut() {
        *y = usize::from(rng.random::<bool>());
    }
    let ds = EvalDataset::new(ds.patient_ids, ds.embeddings, ds.labels, 2).unwrap();
    let report = mlp_cv(&ds, None, &small_mlp()).unwrap();
    let (mean, _) = mean_std(&report.metric_values(|m| m.auroc));
    assert!((0.4..=0.6).contains(&mean), "auroc {mean}");
}

#[test]
fn class_weighting_handles_imbalance() {
    let ds = separable(&[180, 20], 16, 8.0, 3);
    let report = mlp_cv(&ds, None, &small_mlp()).unwrap();
    let (mean, _) = mean_std(&report.metric_values(|m| m.balanced_accuracy));
    assert!(mean >= 0.95, "balanced accuracy {mean}");
}

#[test]
fn external_cohort_is_scored_by_every_fold() {
    let ds = separable(&[30, 30, 30], 12, 6.0, 5);
    let ext = separable(&[10, 10, 10], 12, 6.0, 6);
    let report = mlp_cv(&ds, Some(&ext), &small_mlp()).unwrap();
    assert_eq!(report.folds.len(), 5);
    assert!(report.folds.iter().all(|f| f.metrics.auroc > 0.9));
}

#[test]
fn missing_class_in_training_split_is_reported() {
    let ds = separable(&[20, 1], 4, 4.0, 7);
    assert!(matches!(
        mlp_cv(&ds, None, &small_mlp()),
        Err(cobra_core::Error::Stratification(_))
    ));
}

#[test]
fn five_shot_probe_on_separable_classes() {
    let ds = separable(&[30, 30, 30], 16, 6.0, 8);
    let cfg = ProbeConfig {
        shots: vec![5],
        ..Default::default()
    };
    let runs = linear_probe_fewshot(&ds, &cfg).unwrap();
    assert_eq!(runs.len(), 10);
    let acc: Vec<f64> = runs.iter().map(|r| r.metrics.accuracy).collect();
    assert!(mean_std(&acc).0 >= 0.9, "{acc:?}");
    assert_eq!(runs, linear_probe_fewshot(&ds, &cfg).unwrap());
}

#[test]
fn probe_names_the_short_class() {
    let ds = separable(&[30, 4, 30], 8, 6.0, 9);
    let cfg = ProbeConfig {
        shots: vec![5],
        ..Default::default()
    };
    let err = linear_probe_fewshot(&ds, &cfg).unwrap_err().to_string();
    assert!(err.contains("class 1"), "{err}");
}

#[test]
fn probe_solution_is_stationary() {
    // the regularized objective is flat at the fitted weights, up to the
    // solver's relative-decrease stop
    let ds = separable(&[8, 8, 8], 5, 1.5, 10);
    let y = &ds.labels;
    let (c, k, d) = (1.0, 3, 5);
    let model = LogisticRegression::fit(ds.embeddings.view(), y, k, c, 10_000, 1e-10).unwrap();
    let weights = balanced_class_weights(y, k);
    let objective = |p: &[f64]| {
        let w = Array2::from_shape_vec((k, d), p[..k * d].to_vec()).unwrap();
        let b = &p[k * d..];
        let mut total = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
        for (i, row) in ds.embeddings.rows().into_iter().enumerate() {
            let logits: Vec<f64> = (0..k).map(|j| w.row(j).dot(&row) + b[j]).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            total += c * weights[y[i]] * (lse - logits[y[i]]);
        }
        total
    };
    let mut point: Vec<f64> = model.weight.iter().copied().collect();
    point.extend(model.bias.iter());
    let grad = numeric_gradient(&point, 1e-6, objective);
    let worst = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    assert!(worst < 1e-4, "gradient at solution {worst}");
}
