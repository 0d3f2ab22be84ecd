use cobra_core::checkpoint::load_checkpoint;
use cobra_core::contrastive::*;
use cobra_core::encoder::EncoderConfig;
use cobra_core::feature_store::*;
use cobra_core::{Error, Parameters};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(dir: &std::path::Path, extractors: &[ExtractorSpec], mags: &[f64]) -> FeatureStore {
    let cfg = SyntheticGenConfig {
        patients_per_class: 4,
        tiles_per_bag: [10, 16],
        signal_tile_fraction: 0.4,
        seed: 1,
        ..Default::default()
    };
    generate_corpus(&cfg, extractors, mags, dir).unwrap();
    FeatureStore::open(dir).unwrap()
}

fn two_extractors() -> Vec<ExtractorSpec> {
    vec![ExtractorSpec::new("fm-a", 12, 1), ExtractorSpec::new("fm-b", 16, 2)]
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_model: 8,
            d_hidden: 8,
            ssd_heads: 2,
            d_state: 4,
            attn_heads: 2,
            attn_dim: 4,
            ..Default::default()
        },
        heads: HeadConfig {
            proj_hidden: 16,
            proj_dim: 8,
            pred_hidden: 16,
        },
    }
}

fn toy_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 6,
        epochs,
        lr: 1e-3,
        warmup_epochs: 1.0,
        ..Default::default()
    }
}

fn ids(store: &FeatureStore) -> Vec<String> {
    store.patient_ids().into_iter().map(str::to_string).collect()
}

fn distance(key: &KeyModel, query: &QueryModel) -> f64 {
    let q: std::collections::BTreeMap<_, _> = query.tensors().into_iter().collect();
    key.tensors()
        .into_iter()
        .map(|(name, k)| (&k - &q[&name]).mapv(|v| v * v).sum())
        .sum::<f64>()
        .sqrt()
}

#[test]
fn key_tensors_follow_an_independent_ema_replay() {
    let dir = tempfile::tempdir().unwrap();
    let store = corpus(dir.path(), &two_extractors(), &[0.5, 2.0]);
    let mut trainer = Trainer::new(&store, toy_train(1), toy_model()).unwrap();
    let all = ids(&store);
    let m = trainer.config().momentum;
    let mut shadow: Vec<Vec<f64>> = trainer.key().tensors().iter().map(|(_, t)| t.iter().copied().collect()).collect();
    for step in 0..10 {
        trainer.step(&all[step % 6..step % 6 + 6], 1e-3).unwrap();
        let query: std::collections::BTreeMap<_, _> = trainer.query().tensors().into_iter().collect();
        let key_names: Vec<String> = trainer.key().tensors().into_iter().map(|(n, _)| n).collect();
        for (s, name) in shadow.iter_mut().zip(&key_names) {
            for (sv, &qv) in s.iter_mut().zip(query[name].iter()) {
                *sv = m * *sv + (1.0 - m) * qv;
            }
        }
        for ((name, k), s) in trainer.key().tensors().into_iter().zip(&shadow) {
            assert!(k.iter().zip(s).all(|(a, b)| a == b), "step {step}: {name} drifted from replay");
        }
    }
}

#[test]
fn zero_lr_freezes_query_and_pulls_key_in_geometrically() {
    let dir = tempfile::tempdir().unwrap();
    let store = corpus(dir.path(), &two_extractors(), &[0.5, 2.0]);
    let mut trainer = Trainer::new(&store, toy_train(1), toy_model()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (_, mut t) in trainer.key_mut().tensors_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
    }
    let query_before = trainer.query().clone();
    let all = ids(&store);
    let mut d = distance(trainer.key(), trainer.query());
    for _ in 0..10 {
        trainer.step(&all[..6], 0.0).unwrap();
        let next = distance(trainer.key(), trainer.query());
        assert!((next / d - 0.99).abs() < 1e-9, "ratio {}", next / d);
        d = next;
    }
    assert_eq!(trainer.query(), &query_before);
}

#[test]
fn frozen_key_receives_no_update() {
    let dir = tempfile::tempdir().unwrap();
    let store = corpus(dir.path(), &two_extractors(), &[0.5, 2.0]);
    let mut trainer = Trainer::new(&store, toy_train(1), toy_model()).unwrap();
    trainer.set_momentum(1.0).unwrap();
    let key_before = trainer.key().clone();
    let query_before = trainer.query().clone();
    trainer.run_epoch(0).unwrap();
    trainer.step(&ids(&store)[..4], 1e-3).unwrap();
    assert_eq!(trainer.key(), &key_before);
    assert_ne!(trainer.query(), &query_before);
}

#[test]
fn random_frozen_keys_leave_loss_near_chance() {
    let dir = tempfile::tempdir().unwrap();
    let store = corpus(dir.path(), &two_extractors(), &[0.5, 2.0]);
    let cfg = TrainConfig {
        batch_size: 12,
        ..toy_train(30)
    };
    let mut trainer = Trainer::new(&store, cfg, toy_model()).unwrap();
    trainer.set_momentum(1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let fresh = QueryModel::new(trainer.model_config(), &mut rng).unwrap().key_copy();
    *trainer.key_mut() = fresh;
    let mut last = 0.0;
    for epoch in 0..30 {
        last = trainer.run_epoch(epoch).unwrap().loss;
    }
    let chance = 12f64.ln();
    assert!(last > 0.5 * chance && last < 1.5 * chance, "loss {last} vs log(batch) {chance}");
}

#[test]
fn identical_seeds_give_identical_logs_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let store = corpus(dir.path(), &two_extractors(), &[0.5, 2.0]);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = TrainConfig {
        checkpoint_every: 2,
        ..toy_train(3)
    };
    let ra = train(&store, &cfg, &toy_model(), Some(a.path())).unwrap();
    train(&store, &cfg, &toy_model(), Some(b.path())).unwrap();
    for f in ["metrics.csv", "checkpoint.ckpt", "checkpoint_epoch00002.ckpt"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let csv = std::fs::read_to_string(a.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "epoch,step,loss,alignment,uniformity,lr");
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(csv, ra.metrics_csv());

    let ckpt = load_checkpoint(&a.path().join("checkpoint.ckpt")).unwrap();
    assert_eq!(ckpt.query, ra.query);
    assert_eq!(ckpt.key, ra.key);
    assert_eq!(ckpt.header.epoch, 3);
}

#[test]
fn huge_learning_rate_is_reported_as_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let store = corpus(dir.path(), &two_extractors(), &[0.5, 2.0]);
    let cfg = TrainConfig {
        lr: 1e300,
        warmup_epochs: 0.0,
        ..toy_train(3)
    };
    assert!(matches!(train(&store, &cfg, &toy_model(), None), Err(Error::Divergence(_))));
}

#[test]
fn pair_sides_draw_extractors_independently() {
    let dir = tempfile::tempdir().unwrap();
    let ex: Vec<ExtractorSpec> = (0..4).map(|i| ExtractorSpec::new(format!("fm-{i}"), 4, i)).collect();
    let store = corpus(dir.path(), &ex, &[0.5]);
    let id = store.patient_ids()[0].to_string();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let same = (0..n)
        .filter(|_| {
            let (a, b) = make_pair(&store, &id, &mut rng, 768).unwrap();
            a.extractor_id == b.extractor_id
        })
        .count();
    let sigma = (n as f64 * 0.25 * 0.75).sqrt();
    assert!((same as f64 - n as f64 * 0.25).abs() <= 3.0 * sigma, "{same}");

    let (a, b) = make_pair(&store, &id, &mut ChaCha8Rng::seed_from_u64(9), 8).unwrap();
    let (c, d) = make_pair(&store, &id, &mut ChaCha8Rng::seed_from_u64(9), 8).unwrap();
    assert_eq!((a, b), (c, d));
}

#[test]
fn single_source_pairs_differ_only_in_tiles() {
    let dir = tempfile::tempdir().unwrap();
    let store = corpus(dir.path(), &two_extractors()[..1], &[0.5]);
    let id = store.patient_ids()[0].to_string();
    let (a, b) = make_pair(&store, &id, &mut ChaCha8Rng::seed_from_u64(2), 5).unwrap();
    assert_eq!((a.extractor_id.as_str(), a.magnification), (b.extractor_id.as_str(), b.magnification));
    assert_ne!(a.tile_indices, b.tile_indices);
}

#[test]
fn batch_loss_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let unit = |rng: &mut ChaCha8Rng| {
        let m = Array2::from_shape_fn((8, 6), |_| rng.random_range(-1.0..1.0));
        cobra_core::nn::l2_normalize_rows(&m).0
    };
    let (q, k) = (unit(&mut rng), unit(&mut rng));
    let tau = 0.2;
    for i in 0..8 {
        let sims: Vec<f64> = (0..8).map(|j| q.row(i).dot(&k.row(j)) / tau).collect();
        let denom: f64 = sims.iter().map(|s| s.exp()).sum();
        let naive = -(sims[i].exp() / denom).ln();
        let loss = info_nce(q.row(i), k.view(), i, tau).unwrap();
        assert!((loss - naive).abs() <= 1e-12);
    }
}
