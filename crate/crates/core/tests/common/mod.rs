//! Oracles shared by the integration suites and the acceptance run.
#![allow(dead_code)]

use cobra_core::contrastive::{info_nce_batch, HeadConfig, ModelConfig, QueryModel};
use cobra_core::encoder::{EncoderConfig, InferenceMode, SlideEncoder};
use cobra_core::feature_store::{ExtractorSpec, PatchBag};
use cobra_core::gradcheck::check_gradient_five_point;
use cobra_core::nn::{l2_normalize_rows, l2_normalize_rows_backward};
use cobra_core::ssd::{SsdConfig, SsdLayer};
use cobra_core::Parameters;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_layer(d_model: usize, n_heads: usize, d_state: usize, rng: &mut ChaCha8Rng) -> SsdLayer {
    let cfg = SsdConfig {
        d_model,
        n_heads,
        d_state,
        ..SsdConfig::default()
    };
    let mut layer = SsdLayer::new(&cfg, rng);
    for (name, mut t) in layer.tensors_mut() {
        let (lo, hi) = if name.starts_with("a_log") { (-1.5, 1.5) } else { (-1.0, 1.0) };
        t.mapv_inplace(|_| rng.random_range(lo..hi));
    }
    layer
}

pub fn input(rng: &mut ChaCha8Rng, l: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((l, d), |_| rng.random_range(-1.0..1.0))
}

fn matmul_t(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    // x: L × in, w: out × in
    let (l, n_in) = x.dim();
    let n_out = w.nrows();
    Array2::from_shape_fn((l, n_out), |(t, o)| (0..n_in).map(|i| x[[t, i]] * w[[o, i]]).sum())
}

/// Builds the lower-triangular mixing matrix per head explicitly and applies
/// it to the inputs, then the skip term and the output projection.
pub fn dense_oracle(layer: &SsdLayer, u: &Array2<f64>) -> Array2<f64> {
    let (l, d) = u.dim();
    let h_count = layer.a_log.len();
    let p = d / h_count;
    let n = layer.b_proj.weight.nrows() / h_count;
    let mut dt = matmul_t(u, &layer.dt_proj.weight);
    if let Some(bias) = &layer.dt_proj.bias {
        for mut row in dt.rows_mut() {
            row += bias;
        }
    }
    dt.mapv_inplace(|x| (1.0 + x.exp()).ln());
    let b = matmul_t(u, &layer.b_proj.weight);
    let c = matmul_t(u, &layer.c_proj.weight);
    let mut y = Array2::<f64>::zeros((l, d));
    for h in 0..h_count {
        let a = -layer.a_log[h].exp();
        let mut m = Array2::<f64>::zeros((l, l));
        for t in 0..l {
            for s in 0..=t {
                let cb: f64 = (0..n).map(|k| c[[t, h * n + k]] * b[[s, h * n + k]]).sum();
                let decay: f64 = ((s + 1)..=t).map(|r| (dt[[r, h]] * a).exp()).product();
                m[[t, s]] = cb * decay * dt[[s, h]];
            }
        }
        for t in 0..l {
            for q in 0..p {
                let ch = h * p + q;
                let mixed: f64 = (0..l).map(|s| m[[t, s]] * u[[s, ch]]).sum();
                y[[t, ch]] = mixed + layer.d_skip[ch] * u[[t, ch]];
            }
        }
    }
    matmul_t(&y, &layer.out_proj.weight)
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_model: 8,
            d_hidden: 8,
            n_ssd_layers: 2,
            ssd_heads: 2,
            d_state: 3,
            attn_heads: 2,
            attn_dim: 4,
            dropout: 0.0,
            extractors: vec![ExtractorSpec::new("a", 6, 1)],
            ..Default::default()
        },
        heads: HeadConfig {
            proj_hidden: 6,
            proj_dim: 4,
            pred_hidden: 6,
        },
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn bag(rng: &mut ChaCha8Rng, extractor: &str, n: usize, d: usize) -> PatchBag {
    PatchBag {
        patient_id: "p".into(),
        slide_id: "s".into(),
        extractor_id: extractor.into(),
        magnification_mpp: 0.5,
        features: Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0f32..1.0)),
    }
}

/// Query-side loss on fixed keys, dropout off.
pub fn query_loss(model: &QueryModel, tiles: &[Array2<f64>], keys: &Array2<f64>) -> f64 {
    let mut z = Array2::zeros((tiles.len(), 8));
    for (mut row, x) in z.rows_mut().into_iter().zip(tiles) {
        row.assign(&model.encoder.forward_train::<ChaCha8Rng>("a", x, None).unwrap().0);
    }
    let (p, _) = model.projector.forward::<ChaCha8Rng>(&z, 0.0, None);
    let (r, _) = model.predictor.forward::<ChaCha8Rng>(&p, 0.0, None);
    info_nce_batch(&l2_normalize_rows(&r).0, keys, 0.2).unwrap().0
}

/// Largest relative error over parameters and inputs for one seed of the
/// encoder + heads + InfoNCE gradient check.
pub fn encoder_gradcheck(seed: u64) -> f64 {
    let cfg = toy_model_config();
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = QueryModel::new(&cfg, &mut rng).unwrap();
        let tiles: Vec<Array2<f64>> = (0..3).map(|_| random_matrix(&mut rng, (5, 6))).collect();
        let keys = l2_normalize_rows(&random_matrix(&mut rng, (3, 4))).0;

        let mut caches = Vec::new();
        let mut z = Array2::zeros((3, 8));
        for (mut row, x) in z.rows_mut().into_iter().zip(&tiles) {
            let (zi, cache) = model.encoder.forward_train::<ChaCha8Rng>("a", x, None).unwrap();
            row.assign(&zi);
            caches.push(cache);
        }
        let (p, p_cache) = model.projector.forward::<ChaCha8Rng>(&z, 0.0, None);
        let (r, r_cache) = model.predictor.forward::<ChaCha8Rng>(&p, 0.0, None);
        let (q, norms) = l2_normalize_rows(&r);
        let (_, g_q) = info_nce_batch(&q, &keys, 0.2).unwrap();

        let mut grads = model.zeros_like();
        let g_r = l2_normalize_rows_backward(&q, &norms, &g_q);
        let g_p = model.predictor.backward(&r_cache, &g_r, &mut grads.predictor);
        let g_z = model.projector.backward(&p_cache, &g_p, &mut grads.projector);
        let mut g_tiles = Vec::new();
        for (cache, gz) in caches.iter().zip(g_z.rows()) {
            g_tiles.push(model.encoder.backward(cache, &gz.to_owned(), &mut grads.encoder));
        }

        let report = check_gradient_five_point(&model.flatten(), &grads.flatten(), 1e-3, |flat| {
            let mut m = model.clone();
            m.assign_flat(flat).unwrap();
            query_loss(&m, &tiles, &keys)
        });
        let params_err = report.max_rel_error;

        let x0: Vec<f64> = tiles[0].iter().copied().collect();
        let report = check_gradient_five_point(&x0, &g_tiles[0].iter().copied().collect::<Vec<_>>(), 1e-3, |flat| {
            let mut t = tiles.clone();
            t[0] = Array2::from_shape_vec((5, 6), flat.to_vec()).unwrap();
            query_loss(&model, &t, &keys)
        });
        params_err.max(report.max_rel_error)
    }
}


/// Simplex and convex-hull checks for one random single-FM forward.
pub fn simplex_and_hull(seed: u64, n: usize, scale: f64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = toy_model_config().encoder;
    let enc = SlideEncoder::new(cfg, &mut rng).map_err(|e| e.to_string())?;
    let mut b = bag(&mut rng, "a", n, 6);
    b.features.mapv_inplace(|v| v * scale as f32);
    let (emb, w) = enc.infer(&b, InferenceMode::SingleFm).map_err(|e| e.to_string())?;
    for row in w.per_head.rows() {
        if (row.sum() - 1.0).abs() > 1e-6 || row.iter().any(|&a| a < 0.0) {
            return Err(format!("head weights {row} are not a simplex"));
        }
    }
    if (w.combined.sum() - 1.0).abs() > 1e-6 {
        return Err("combined weights do not sum to 1".into());
    }
    let raw = b.features.mapv(f64::from);
    for (j, &zj) in emb.z.iter().enumerate() {
        let col = raw.column(j);
        let lo = col.fold(f64::INFINITY, |a, &v| a.min(v));
        let hi = col.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        if zj < lo - 1e-9 || zj > hi + 1e-9 {
            return Err(format!("coordinate {j}: {zj} outside [{lo}, {hi}]"));
        }
    }
    Ok(())
}
