mod common;

use cobra_core::encoder::{GatedAttention, InferenceMode, SlideEncoder};
use cobra_core::feature_store::ExtractorSpec;
use common::{bag, encoder_gradcheck, random_matrix, simplex_and_hull, toy_model_config};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn encoder_projection_and_info_nce_pass_gradcheck() {
    for seed in 0..20 {
        let err = encoder_gradcheck(seed);
        assert!(err < 1e-4, "seed {seed}: {err}");
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gated scores and softmax written out element by element.
fn direct_weights(attn: &GatedAttention, h: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let heads = attn.heads.len();
    let dh = h.ncols() / heads;
    let n = h.nrows();
    let mut per_head = Array2::zeros((heads, n));
    for (m, head) in attn.heads.iter().enumerate() {
        let scores: Vec<f64> = (0..n)
            .map(|k| {
                (0..head.w.len())
                    .map(|j| {
                        let vx: f64 = (0..dh).map(|i| head.v[[j, i]] * h[[k, m * dh + i]]).sum();
                        let ux: f64 = (0..dh).map(|i| head.u[[j, i]] * h[[k, m * dh + i]]).sum();
                        head.w[j] * vx.tanh() * sigmoid(ux)
                    })
                    .sum()
            })
            .collect();
        let denom: f64 = scores.iter().map(|s| s.exp()).sum();
        for k in 0..n {
            per_head[[m, k]] = scores[k].exp() / denom;
        }
    }
    let combined = Array1::from_shape_fn(n, |k| (0..heads).map(|m| per_head[[m, k]]).sum::<f64>() / heads as f64);
    (per_head, combined)
}

#[test]
fn attention_matches_direct_formula() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attn = GatedAttention::new(8, 2, 5, &mut rng).unwrap();
        let h = random_matrix(&mut rng, (3, 8));
        let (w, _) = attn.forward::<ChaCha8Rng>(&h, 0.0, None).unwrap();
        let (per_head, combined) = direct_weights(&attn, &h);
        for (a, b) in w.per_head.iter().zip(&per_head) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in w.combined.iter().zip(&combined) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn weights_form_a_simplex_and_single_fm_is_convex(
        seed in any::<u64>(),
        n in 1usize..40,
        scale in 0.1f64..20.0,
    ) {
        let checked = simplex_and_hull(seed, n, scale);
        prop_assert!(checked.is_ok(), "{:?}", checked);
    }
}

#[test]
fn modes_share_weights_and_combined_degenerates_to_single() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut cfg = toy_model_config().encoder;
    cfg.extractors = vec![ExtractorSpec::new("a", 6, 1), ExtractorSpec::new("b", 6, 2)];
    let mut enc = SlideEncoder::new(cfg, &mut rng).unwrap();
    let ba = bag(&mut rng, "a", 7, 6);
    let (enc_z, w_enc) = enc.infer(&ba, InferenceMode::Enc).unwrap();
    let (single, w_single) = enc.infer(&ba, InferenceMode::SingleFm).unwrap();
    assert_eq!(w_enc, w_single);
    assert_eq!(enc_z.z.len(), 8);
    assert_eq!(single.z.len(), 6);

    let (combined, _) = enc.infer(&ba, InferenceMode::CombinedFm).unwrap();
    assert!(combined.z.iter().zip(&single.z).all(|(a, b)| (a - b).abs() <= 1e-6));

    let mut bb = ba.clone();
    bb.extractor_id = "b".into();
    let shared = enc.embed["a"].clone();
    enc.embed.insert("b".into(), shared);
    let (both, _) = enc.encode_combined(&[ba.clone(), bb], "a").unwrap();
    let (single, _) = enc.infer(&ba, InferenceMode::SingleFm).unwrap();
    assert!(both.z.iter().zip(&single.z).all(|(a, b)| (a - b).abs() <= 1e-6));
}
