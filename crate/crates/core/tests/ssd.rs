mod common;

use cobra_core::gradcheck::check_gradient;
use cobra_core::ssd::{selective_scan, ScanInputs, SsdLayer};
use common::{dense_oracle, input, max_abs_diff, random_layer as layer};
use cobra_core::Parameters;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn small_case_matches_dense_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let layer = layer(4, 1, 3, &mut rng);
    let u = input(&mut rng, 6, 4);
    let y = layer.ssd_forward(&u).unwrap();
    assert!(max_abs_diff(&y, &dense_oracle(&layer, &u)) <= 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn recurrence_equals_dense_matrix(
        l in 1usize..=16,
        heads in 1usize..=2,
        head_dim in 1usize..=4,
        d_state in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = layer(heads * head_dim, heads, d_state, &mut rng);
        let u = input(&mut rng, l, heads * head_dim);
        let y = layer.ssd_forward(&u).unwrap();
        let err = max_abs_diff(&y, &dense_oracle(&layer, &u));
        prop_assert!(err <= 1e-10, "max-abs {err}");
    }

    #[test]
    fn perturbation_only_moves_later_outputs(seed in any::<u64>(), l in 2usize..=12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = layer(6, 2, 3, &mut rng);
        let x = input(&mut rng, l, 6);
        let y = layer.block(&x).unwrap();
        let t = rng.random_range(0..l);
        let mut x2 = x.clone();
        x2[[t, rng.random_range(0..6)]] += 0.5;
        let y2 = layer.block(&x2).unwrap();
        for s in 0..t {
            prop_assert_eq!(y.row(s), y2.row(s));
        }
        prop_assert!(y.row(t) != y2.row(t));
    }
}

#[test]
fn block_gradients_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let base = layer(6, 2, 3, &mut rng);
        let x = input(&mut rng, 8, 6);
        let w = input(&mut rng, 8, 6);
        let loss = |layer: &SsdLayer, x: &Array2<f64>| (layer.block(x).unwrap() * &w).sum();

        let (_, cache) = base.block_forward(&x).unwrap();
        let mut grads = base.zeros_like();
        let gx = base.block_backward(&cache, &w, &mut grads);

        let flat = base.flatten();
        let report = check_gradient(&flat, &grads.flatten(), 1e-6, |p| {
            let mut l = base.clone();
            l.assign_flat(p).unwrap();
            loss(&l, &x)
        });
        assert!(report.max_rel_error < 1e-4, "parameters: {report:?}");

        let xs: Vec<f64> = x.iter().copied().collect();
        let report = check_gradient(&xs, &gx.iter().copied().collect::<Vec<_>>(), 1e-6, |p| {
            loss(&base, &Array2::from_shape_vec((8, 6), p.to_vec()).unwrap())
        });
        assert!(report.max_rel_error < 1e-4, "inputs: {report:?}");
    }
}

#[test]
fn zeroed_output_projection_contributes_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut layer = layer(8, 2, 4, &mut rng);
    layer.out_proj.weight.fill(0.0);
    let y = layer.block(&input(&mut rng, 9, 8)).unwrap();
    assert!(y.iter().all(|&v| v == 0.0));
}

#[test]
fn million_steps_stay_within_geometric_bound() {
    let len = 1_000_000;
    let (d_state, d_model) = (2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let u = input(&mut rng, len, d_model);
    let dt = Array2::from_shape_fn((len, 1), |_| rng.random_range(0.05..2.0));
    let b = input(&mut rng, len, d_state);
    let c = input(&mut rng, len, d_state);
    let a = Array1::from_elem(1, -0.3);
    let d_skip = Array1::from_elem(d_model, 0.7);
    let inputs = ScanInputs {
        u: u.view(),
        dt: dt.view(),
        b: b.view(),
        c: c.view(),
        a: a.view(),
        d_skip: d_skip.view(),
    };
    let (y, states) = selective_scan(&inputs, d_state);
    assert!(y.iter().all(|v| v.is_finite()));

    let decay_max = dt.iter().map(|&d| (d * a[0]).exp()).fold(0.0, f64::max);
    let drive_max = (0..len)
        .map(|t| {
            let bmax = b.row(t).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let umax = u.row(t).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            dt[[t, 0]] * bmax * umax
        })
        .fold(0.0, f64::max);
    let bound = drive_max / (1.0 - decay_max);
    let peak = states.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(peak.is_finite() && peak <= bound, "peak {peak} bound {bound}");
}
