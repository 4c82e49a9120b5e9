use leffa_core::attention_flow::{
    attention_to_flow, average_heads, coordinate_map, AttentionMap, LeffaConfig, LossReduction,
};
use leffa_core::diffusion::{add_noise_with, DiffusionSchedule};
use leffa_core::model::{DualBranchModel, ModelConfig};
use leffa_core::synthdata::{generate, TaskKind, TaskParams};
use leffa_core::tensor::{bilinear_resize, softmax_lastdim, Tensor};
use leffa_core::warp::{grid_sample, leffa_loss};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(max_rows: usize, max_cols: usize) -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1..=max_rows, 2..=max_cols).prop_flat_map(|(m, n)| (Just(m), Just(n), prop::collection::vec(-8.0f64..8.0, m * n)))
}

/// Row-stochastic `[n_q × cols]` from seeded logits.
fn stochastic(n_q: usize, cols: usize, scale: f64, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    softmax_lastdim(&Tensor::<f32>::randn(vec![n_q, cols], scale, &mut rng), 1.0).unwrap()
}

fn task(kind: usize) -> TaskParams {
    let kind = [TaskKind::PatchPermutation, TaskKind::Shift, TaskKind::Stripes, TaskKind::TryonFill][kind];
    TaskParams { kind, grid_n: 4, period: 4 }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions((m, n, data) in rows(6, 12), tau in 0.1f64..5.0) {
        let y = softmax_lastdim(&Tensor::new(vec![m, n], data).unwrap(), tau).unwrap();
        for row in y.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn larger_tau_flattens_every_row((m, n, data) in rows(4, 10), tau in 0.2f64..4.0, factor in 1.05f64..4.0) {
        let x = Tensor::new(vec![m, n], data).unwrap();
        let (a, b) = (softmax_lastdim(&x, tau).unwrap(), softmax_lastdim(&x, tau * factor).unwrap());
        for (i, (ra, rb)) in a.data().chunks(n).zip(b.data().chunks(n)).enumerate() {
            let logits = &x.data()[i * n..(i + 1) * n];
            let spread = logits.iter().cloned().fold(f64::MIN, f64::max) - logits.iter().cloned().fold(f64::MAX, f64::min);
            let (ma, mb) = (ra.iter().cloned().fold(0.0, f64::max), rb.iter().cloned().fold(0.0, f64::max));
            if spread > 1e-6 {
                prop_assert!(mb < ma, "row {i}: {mb} !< {ma}");
            }
        }
    }

    #[test]
    fn flow_stays_in_the_unit_box(h in 1usize..6, w in 1usize..6, r in 0usize..4, scale in 0.01f64..30.0, seed in any::<u64>()) {
        let n = h * w;
        let a = stochastic(n, n + r, scale, seed);
        let f = attention_to_flow(&a, &coordinate_map(h, w), r).unwrap();
        prop_assert!(f.in_unit_box());
    }

    #[test]
    fn one_hot_rows_permute_the_coordinate_map(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let n = h * w;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picks: Vec<usize> = (0..n).map(|_| rand::Rng::gen_range(&mut rng, 0..n)).collect();
        let mut a = Tensor::<f32>::zeros(vec![n, n]);
        for (i, &j) in picks.iter().enumerate() {
            a.set(&[i, j], 1.0);
        }
        let coords = coordinate_map::<f32>(h, w);
        let f = attention_to_flow(&a, &coords, 0).unwrap();
        for (i, &j) in picks.iter().enumerate() {
            prop_assert_eq!(&f.flow.data()[2 * i..2 * i + 2], &coords.coords.data()[2 * j..2 * j + 2]);
        }
    }

    #[test]
    fn identical_heads_average_to_themselves(heads in 1usize..5, r in 0usize..3, seed in any::<u64>()) {
        let (h, w) = (3, 4);
        let n = h * w;
        let one = stochastic(n, n + r, 2.0, seed);
        let stacked: Vec<f32> = (0..heads).flat_map(|_| one.data().to_vec()).collect();
        let map = AttentionMap::new(Tensor::new(vec![heads, n, n + r], stacked).unwrap(), n, r).unwrap();
        let coords = coordinate_map(h, w);
        let via_avg = attention_to_flow(&average_heads(&map), &coords, r).unwrap();
        let direct = attention_to_flow(&one, &coords, r).unwrap();
        for (a, b) in via_avg.flow.data().iter().zip(direct.flow.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn identity_warp_is_bit_exact(c in 1usize..4, h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::<f32>::randn(vec![c, h, w], 1.0, &mut rng);
        let flow = leffa_core::attention_flow::FlowField::new(coordinate_map(h, w).coords).unwrap();
        prop_assert_eq!(grid_sample(&img, &flow).unwrap(), img);
    }

    #[test]
    fn warp_stays_in_the_image_range(h in 2usize..9, w in 2usize..9, seed in any::<u64>(), spread in 0.5f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Tensor::<f64>::randn(vec![2, h, w], 1.0, &mut rng);
        let flow = leffa_core::attention_flow::FlowField::new(Tensor::randn(vec![h, w, 2], spread, &mut rng)).unwrap();
        let out = grid_sample(&img, &flow).unwrap();
        let (lo, hi) = (img.data().iter().cloned().fold(f64::MAX, f64::min), img.data().iter().cloned().fold(f64::MIN, f64::max));
        prop_assert!(out.data().iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
    }

    #[test]
    fn resize_keeps_corners_and_constants(h in 2usize..8, w in 2usize..8, oh in 2usize..12, ow in 2usize..12, seed in any::<u64>(), k in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(vec![1, h, w], 1.0, &mut rng);
        let y = bilinear_resize(&x, oh, ow).unwrap();
        for (i, j, oi, oj) in [(0, 0, 0, 0), (0, w - 1, 0, ow - 1), (h - 1, 0, oh - 1, 0), (h - 1, w - 1, oh - 1, ow - 1)] {
            prop_assert_eq!(y.get(&[0, oi, oj]), x.get(&[0, i, j]));
        }
        let c = bilinear_resize(&Tensor::<f64>::full(vec![1, h, w], k), oh, ow).unwrap();
        prop_assert!(c.data().iter().all(|v| *v == k));
    }

    #[test]
    fn noising_is_linear(seed in any::<u64>(), a in -2.0f64..2.0, t in 0usize..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = vec![2, 3];
        let (z1, z2, e1, e2) = (
            Tensor::<f64>::randn(shape.clone(), 1.0, &mut rng),
            Tensor::<f64>::randn(shape.clone(), 1.0, &mut rng),
            Tensor::<f64>::randn(shape.clone(), 1.0, &mut rng),
            Tensor::<f64>::randn(shape.clone(), 1.0, &mut rng),
        );
        let ab = DiffusionSchedule::default().alpha_bar(t);
        let combo = |x: &Tensor<f64>, y: &Tensor<f64>| x.zip_map(&y.map(|v| a * v), "combo", |p, q| p + q).unwrap();
        let lhs = add_noise_with(&combo(&z1, &z2), &combo(&e1, &e2), ab).unwrap();
        let rhs = combo(&add_noise_with(&z1, &e1, ab).unwrap(), &add_noise_with(&z2, &e2, ab).unwrap());
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn extra_layers_raise_the_loss(seed in any::<u64>(), layers in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target = Tensor::<f64>::randn(vec![3, 4, 4], 1.0, &mut rng);
        let mask = Tensor::<f64>::full(vec![1, 4, 4], 1.0);
        let warps: Vec<Tensor<f64>> = (0..=layers).map(|_| Tensor::randn(vec![3, 4, 4], 1.0, &mut rng)).collect();
        for red in [LossReduction::Mean, LossReduction::Sum] {
            let fewer = leffa_loss(&warps[..layers], &target, &mask, red).unwrap();
            let more = leffa_loss(&warps, &target, &mask, red).unwrap();
            prop_assert!(more > fewer);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_targets_are_warped_references(seed in any::<u64>(), kind in 0usize..4, hw in prop::sample::select(vec![(16usize, 16usize), (24, 32)])) {
        let s = generate(&task(kind), seed, hw.0, hw.1).unwrap();
        let warped = grid_sample(&s.reference, &s.gt_flow).unwrap();
        let plane = hw.0 * hw.1;
        for p in 0..plane {
            if s.mask.data()[p] > 0.0 {
                for c in 0..3 {
                    prop_assert_eq!(warped.data()[c * plane + p], s.target.data()[c * plane + p]);
                }
                prop_assert!(s.gt_flow.flow.data()[2 * p..2 * p + 2].iter().all(|v| v.abs() <= 1.0));
            }
        }
    }
}

#[test]
fn noise_schedule_is_a_decreasing_unit_split() {
    let s = DiffusionSchedule::default();
    for t in 0..s.steps() {
        let ab = s.alpha_bar(t);
        assert!((ab.sqrt().powi(2) + (1.0 - ab).sqrt().powi(2) - 1.0).abs() <= 1e-6);
        if t > 0 {
            assert!(ab < s.alpha_bar(t - 1));
        }
    }
}

#[test]
fn freezing_keeps_the_parameter_count() {
    let leffa = LeffaConfig::default();
    let cfg = ModelConfig { width: 8, heads: 2, registers: 2, freeze_reference: false };
    let a = DualBranchModel::new(cfg.clone(), 3, &leffa).unwrap();
    let b = DualBranchModel::new(ModelConfig { freeze_reference: true, ..cfg }, 3, &leffa).unwrap();
    assert_eq!(a.init_params(0).scalar_count(), b.init_params(0).scalar_count());
    assert!(a.param_specs().iter().all(|(n, _)| a.is_trainable(n)));
    assert!(b.param_specs().iter().any(|(n, _)| !b.is_trainable(n)));
}
