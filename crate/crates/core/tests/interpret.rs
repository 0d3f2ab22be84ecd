use cobra_core::encoder::{EncoderConfig, InferenceMode, SlideEncoder};
use cobra_core::eval::{extract_embeddings, EmbeddingSpec};
use cobra_core::feature_store::*;
use cobra_core::interpret::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(dir: &std::path::Path) -> (FeatureStore, SlideEncoder) {
    let cfg = SyntheticGenConfig {
        patients_per_class: 2,
        tiles_per_bag: [20, 30],
        seed: 4,
        ..Default::default()
    };
    let ex = vec![ExtractorSpec::new("fm-a", 12, 1), ExtractorSpec::new("fm-b", 16, 2)];
    generate_corpus(&cfg, &ex, &[0.5, 2.0], dir).unwrap();
    let store = FeatureStore::open(dir).unwrap();
    let enc_cfg = EncoderConfig {
        d_model: 8,
        d_hidden: 8,
        ssd_heads: 2,
        d_state: 4,
        attn_heads: 2,
        attn_dim: 4,
        ..Default::default()
    }
    .with_extractors(&ex);
    let encoder = SlideEncoder::new(enc_cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    (store, encoder)
}

#[test]
fn exported_weights_are_the_aggregation_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let (store, encoder) = setup(dir.path());
    for p in store.patient_ids() {
        for e in ["fm-a", "fm-b"] {
            let map = attention_map(&store, &encoder, p, e, 2.0).unwrap();
            let csv_path = out.path().join(format!("{p}_{e}.csv"));
            let pgm_path = out.path().join(format!("{p}_{e}.pgm"));
            export_attention(&map, &csv_path, Some(&pgm_path)).unwrap();

            let bag = store.pooled_bag(p, e, 2.0).unwrap();
            let (_, w) = encoder.infer(&bag, InferenceMode::Enc).unwrap();
            let csv = std::fs::read_to_string(&csv_path).unwrap();
            let parsed = parse_attention_csv(&csv).unwrap();
            assert_eq!(parsed.len(), bag.n_tiles());
            for (t, &wi) in parsed.iter().zip(w.combined.iter()) {
                assert_eq!(t.weight.to_bits(), wi.to_bits());
            }
            let total: f64 = parsed.iter().map(|t| t.weight).sum();
            assert!((total - 1.0).abs() <= 1e-6);

            // the raster is a pure function of the CSV
            let pgm = std::fs::read_to_string(&pgm_path).unwrap();
            assert_eq!(pgm, render_pgm(&parsed).unwrap());
            assert!(pgm.starts_with("P2\n"));
        }
    }
}

#[test]
fn equal_weights_give_a_flat_raster() {
    let tiles: Vec<TileWeight> = (0..12)
        .map(|i| TileWeight {
            tile_index: i,
            x: (i % 4) as u32,
            y: (i / 4) as u32,
            weight: 1.0 / 12.0,
        })
        .collect();
    let pgm = render_pgm(&tiles).unwrap();
    let pixels: Vec<&str> = pgm.lines().skip(4).flat_map(str::split_whitespace).collect();
    assert_eq!(pixels.len(), 12);
    assert!(pixels.iter().all(|&p| p == pixels[0]));
}

#[test]
fn embedding_dump_has_one_row_per_patient() {
    let dir = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let (store, encoder) = setup(dir.path());
    let spec = EmbeddingSpec {
        mode: InferenceMode::Enc,
        payload_extractor: "fm-a".into(),
        magnification: 0.5,
    };
    let ds = extract_embeddings(&store, &encoder, &spec).unwrap();
    let (a, b) = (out.path().join("a.tsv"), out.path().join("b.tsv"));
    export_embeddings(&ds, &a).unwrap();
    export_embeddings(&ds, &b).unwrap();
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 1 + store.patient_ids().len());
    assert!(rows.iter().all(|r| r.split('\t').count() == 2 + 8));
    for (row, i) in rows[1..].iter().zip(0..) {
        let z: Vec<f64> = row.split('\t').skip(2).map(|v| v.parse().unwrap()).collect();
        assert_eq!(z, ds.embeddings.row(i).to_vec());
    }
}
