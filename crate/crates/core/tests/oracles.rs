//! Frozen reference values: hand evaluations, a numpy-computed noise
//! schedule and the published hyperparameters.

use leffa_core::attention_flow::{
    attention, attention_to_flow, coordinate_map, select_layers, timestep_in_scope, LeffaConfig, LossReduction,
    RegisterTokens,
};
use leffa_core::diffusion::{add_noise_with, combined_loss, diffusion_loss, DiffusionSchedule};
use leffa_core::synthdata::{patch_permutation_from, shift_with_offset};
use leffa_core::tensor::{bilinear_resize, conv2d, matmul, softmax_lastdim, Tape, Tensor};
use leffa_core::trainer::{adamw_step, flow_metrics, uniform_attention_epe, AdamState, AdamWConfig};
use leffa_core::warp::{grid_sample, leffa_loss, upsample_flow};

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn matmul_by_hand() {
    let c = matmul(&t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), &t64(&[2, 1], &[1.0, 1.0])).unwrap();
    assert_eq!(c.data(), &[3.0, 7.0]);
}

#[test]
fn softmax_with_temperature_by_hand() {
    let y = softmax_lastdim(&t64(&[1, 2], &[0.0, 4f64.ln()]), 2.0).unwrap();
    assert!(close(y.data()[0], 1.0 / 3.0, 1e-12) && close(y.data()[1], 2.0 / 3.0, 1e-12), "{:?}", y.data());
}

#[test]
fn attention_logits_scaled_by_sqrt_d_and_tau() {
    // d = 4, so q·k = 2 ln 4 gives the logit ln 4 after the √d scale
    let q = t64(&[1, 1, 4], &[4f64.ln(), 4f64.ln(), 0.0, 0.0]);
    let k = t64(&[1, 2, 4], &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    let a = attention(&q, &k, &RegisterTokens::none(4), 2.0).unwrap();
    assert!(close(a.weights.data()[0], 1.0 / 3.0, 1e-12));
    assert!(close(a.weights.data()[1], 2.0 / 3.0, 1e-12));
}

#[test]
fn ones_kernel_counts_neighbours() {
    let x = Tensor::<f64>::full(vec![1, 4, 4], 1.0);
    let k = Tensor::<f64>::full(vec![1, 1, 3, 3], 1.0);
    let y = conv2d(&x, &k, None).unwrap();
    assert_eq!(y.get(&[0, 0, 0]), 4.0);
    assert_eq!(y.get(&[0, 3, 3]), 4.0);
    assert_eq!(y.get(&[0, 1, 2]), 9.0);
    assert_eq!(y.get(&[0, 0, 1]), 6.0);
}

#[test]
fn resize_center_is_the_mean() {
    let y = bilinear_resize(&t64(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]), 3, 3).unwrap();
    assert_eq!(y.get(&[0, 1, 1]), 1.5);
}

#[test]
fn fan_out_sums_both_paths() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t64(&[2], &[1.0, 2.0]));
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.wrt(x).data(), &[2.0, 4.0]);
}

#[test]
fn coordinate_map_corners() {
    // top-left [-1, -1], bottom-right [1, 1]
    let c = coordinate_map::<f64>(2, 2);
    assert_eq!(c.coords.data(), &[-1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0]);
    let c = coordinate_map::<f64>(1, 4);
    let rows: Vec<f64> = c.coords.data().chunks(2).map(|p| p[0]).collect();
    let cols: Vec<f64> = c.coords.data().chunks(2).map(|p| p[1]).collect();
    assert_eq!(rows, vec![0.0; 4]);
    assert!(cols.iter().zip([-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0]).all(|(a, b)| close(*a, b, 1e-15)));
}

#[test]
fn register_mass_is_renormalized_away() {
    let coords = coordinate_map::<f64>(2, 2);
    // half the mass on the register, half on key 3
    let a = t64(&[1, 5], &[0.0, 0.0, 0.0, 0.5, 0.5]);
    let f = attention_to_flow(&a, &coords, 1).unwrap();
    assert!(close(f.flow.data()[0], 1.0, 1e-7) && close(f.flow.data()[1], 1.0, 1e-7));
}

#[test]
fn layer_selection_is_inclusive() {
    let heights = [8, 4, 2, 1];
    assert_eq!(select_layers(&heights, 64, 1.0 / 32.0), vec![0, 1, 2]);
    assert_eq!(select_layers(&heights, 64, 1.0 / 64.0), vec![0, 1, 2, 3]);
}

#[test]
fn published_hyperparameters() {
    let c = LeffaConfig::default();
    assert_eq!(c.lambda_leffa, 1e-3);
    assert_eq!(c.theta_resolution, 1.0 / 32.0);
    assert_eq!(c.theta_timestep, 500);
    assert_eq!(c.temperature, 2.0);
    assert!(timestep_in_scope(300, 500));
    assert!(!timestep_in_scope(500, 500));
}

#[test]
fn upsampled_coordinate_map_is_the_finer_map() {
    let coarse = leffa_core::attention_flow::FlowField::new(coordinate_map::<f64>(2, 2).coords).unwrap();
    let up = upsample_flow(&coarse, 4, 4).unwrap();
    let fine = coordinate_map::<f64>(4, 4).coords;
    assert!(up.flow.data().iter().zip(fine.data()).all(|(a, b)| close(*a, *b, 1e-15)));
}

#[test]
fn masked_mean_of_one_difference() {
    let target = Tensor::<f64>::zeros(vec![3, 2, 2]);
    let mut warped = target.clone();
    warped.set(&[1, 0, 1], 0.5);
    let mut mask = Tensor::<f64>::zeros(vec![1, 2, 2]);
    mask.set(&[0, 0, 1], 1.0);
    let mean = leffa_loss(&[warped.clone()], &target, &mask, LossReduction::Mean).unwrap();
    assert!(close(mean, 0.25 / 3.0, 1e-15));
    let sum = leffa_loss(&[warped], &target, &mask, LossReduction::Sum).unwrap();
    assert_eq!(sum, 0.25);
}

// numpy: b = linspace(1e-4, 2e-2, 1000); cumprod(1 - b)
const ALPHA_BAR: [(usize, f64); 6] = [
    (0, 0.9999),
    (1, 0.9997800920720721),
    (100, 0.8951415908975365),
    (499, 0.07858724288177824),
    (500, 0.07779665836502389),
    (999, 4.035829765375676e-05),
];

#[test]
fn noise_schedule_matches_numpy() {
    let s = DiffusionSchedule::default();
    assert_eq!(s.steps(), 1000);
    assert_eq!(s.beta(0), 1e-4);
    assert!(close(s.beta(999), 2e-2, 1e-17));
    for (t, want) in ALPHA_BAR {
        assert!((s.alpha_bar(t) / want - 1.0).abs() < 1e-12, "t={t}: {} vs {want}", s.alpha_bar(t));
    }
}

#[test]
fn closed_form_noising_and_losses() {
    let z = add_noise_with(&t64(&[1], &[1.0]), &t64(&[1], &[0.0]), 0.25).unwrap();
    assert_eq!(z.data(), &[0.5]);
    assert_eq!(diffusion_loss(&t64(&[2], &[0.0, 0.0]), &t64(&[2], &[1.0, 3.0])).unwrap(), 5.0);
    assert!(close(combined_loss(0.5, 2.0, 1e-3).unwrap(), 0.502, 1e-15));
}

#[test]
fn first_adamw_step_moves_by_the_learning_rate() {
    let mut p = Tensor::<f32>::full(vec![1], 0.0);
    let mut state = AdamState::new(&[&p]);
    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    adamw_step(&mut [&mut p], &[Some(Tensor::full(vec![1], 1.0))], &mut state, 1e-3, &cfg).unwrap();
    assert!((p.data()[0] as f64 + 1e-3).abs() < 1e-8, "{}", p.data()[0]);
}

#[test]
fn quadrant_swap_offsets_span_half_the_image() {
    // grid_n = 2 with the two top patches exchanged; a W/2 pixel move is
    // W/(W-1) in align-corners units
    let s = patch_permutation_from(5, 2, 16, 16, &[1, 0, 2, 3]).unwrap();
    let id = coordinate_map::<f32>(16, 16).coords;
    let offset = 16.0 / 15.0;
    for i in 0..8 {
        for j in 0..16 {
            let p = 2 * (i * 16 + j);
            let dc = s.gt_flow.flow.data()[p + 1] - id.data()[p + 1];
            assert!((dc.abs() - offset).abs() < 1e-6 && s.gt_flow.flow.data()[p] == id.data()[p], "({i}, {j}): {dc}");
        }
    }
}

#[test]
fn identity_flow_on_a_shift_has_the_shift_as_epe() {
    let (h, w, s) = (9, 9, 2isize);
    let sample = shift_with_offset(3, h, w, (0, s)).unwrap();
    let identity = leffa_core::attention_flow::FlowField::new(coordinate_map::<f32>(h, w).coords).unwrap();
    let m = flow_metrics(&sample, &identity).unwrap();
    assert!(close(m.epe, 2.0 * s as f64 / (w - 1) as f64, 1e-6), "{}", m.epe);
}

#[test]
fn uniform_epe_is_the_mean_gt_norm() {
    // uniform attention puts the flow at the grid centroid, the origin
    let s = patch_permutation_from(9, 4, 32, 32, &[5, 2, 7, 1, 0, 3, 4, 6, 15, 9, 10, 14, 8, 12, 13, 11]).unwrap();
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (p, m) in s.mask.data().iter().enumerate() {
        let f = &s.gt_flow.flow.data()[2 * p..2 * p + 2];
        num += *m as f64 * ((f[0] as f64).powi(2) + (f[1] as f64).powi(2)).sqrt();
        den += *m as f64;
    }
    assert!(close(uniform_attention_epe(&s), num / den, 1e-6));
}

#[test]
fn gt_flow_reproduces_the_target() {
    let s = patch_permutation_from(1, 4, 16, 16, &[3, 2, 1, 0, 7, 6, 5, 4, 11, 10, 9, 8, 15, 14, 13, 12]).unwrap();
    assert_eq!(grid_sample(&s.reference, &s.gt_flow).unwrap(), s.target);
}
