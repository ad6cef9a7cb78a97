mod common;

use c3gs_core::cluster::{cluster_colors, cluster_shapes, ClusterConfig};
use c3gs_core::finetune::{finetune, finetune_qat, FinetuneConfig, LearningRates, QatScene, QuantStates};
use c3gs_core::quant::{dequantize_scene, fake_quantize, fake_quantize_backward, QuantRange, QuantState};
use c3gs_core::render::{render_activated, render_backward_activated, RenderOptions};
use c3gs_core::scene::{logit, GaussianScene, Image};
use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn state(bits: u8, min: f64, max: f64) -> QuantState {
    let mut s = QuantState::new(bits).unwrap();
    s.observe(&[min, max]);
    s
}

#[test]
fn half_step_bound_on_a_million_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (bits, min, max) in [(8u8, 0.0, 1.0), (8, -3.7, 12.25), (2, -1.0, 1.0), (16, 1e-3, 2e-3), (5, -40.0, -39.0)] {
        let s = state(bits, min, max);
        let bound = (max - min) / (2.0 * ((1u32 << bits) - 1) as f64) + 1e-12;
        let samples: Vec<f64> = (0..200_000).map(|_| rng.gen_range(min..=max)).collect();
        for (p, q) in samples.iter().zip(fake_quantize(&samples, &s)) {
            assert!((q - p).abs() <= bound, "bits {bits}: {p} -> {q}");
        }
    }
}

#[test]
fn straight_through_gradient_is_bitwise_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-1e3..1e3) * rng.gen::<f64>().powi(9)).collect();
    let back = fake_quantize_backward(&g);
    assert!(g.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
}

proptest! {
    #[test]
    fn frozen_fake_quantize_is_idempotent(bits in 2u8..=16, lo in -100.0f64..100.0, width in 1e-3f64..50.0, p in -200.0f64..200.0) {
        let mut s = state(bits, lo, lo + width);
        s.freeze();
        let once = s.fake_quantize(p);
        prop_assert_eq!(s.fake_quantize(once), once);
        prop_assert_eq!(s.range().value(s.range().code(p)), once);
    }

    #[test]
    fn endpoints_are_exact(bits in 2u8..=16, lo in -100.0f64..100.0, width in 1e-3f64..50.0) {
        let s = state(bits, lo, lo + width);
        prop_assert_eq!(s.fake_quantize(lo), lo);
        prop_assert_eq!(s.fake_quantize(lo + width), lo + width);
    }
}

/// A small clustered scene and its float and quantized forms.
fn clustered(n: usize, seed: u64, k: usize) -> (GaussianScene, QatScene) {
    let scene = random_scene(n, seed, 0.6, (0.15, 0.4));
    let ones = vec![1.0; n];
    let cfg = ClusterConfig { k, steps: 10, batch_size: n, ..ClusterConfig::colors() };
    let colors = cluster_colors(&scene, &ones, f64::INFINITY, &cfg).unwrap();
    let shapes = cluster_shapes(&scene, &ones, f64::INFINITY, &cfg).unwrap();
    let qat = QatScene::from_clustering(&scene, &colors, &shapes);
    (scene, qat)
}

fn frozen_states(qat: &QatScene) -> QuantStates {
    let mut s = QuantStates::new(8, 0.99).unwrap();
    s.observe(qat);
    s.freeze();
    s
}

#[test]
fn grid_values_survive_requantization() {
    let (_, qat) = clustered(20, 3, 4);
    let c = qat.quantize(&frozen_states(&qat)).unwrap();
    let (back, states) = QatScene::from_compressed(&c);
    let again = back.quantize(&states).unwrap();
    assert_eq!(again, c);
    let cam = front_camera(24, 30.0);
    let a = dequantize_scene(&c).unwrap();
    let b = dequantize_scene(&again).unwrap();
    assert_eq!(render_activated(&a, &cam, &RenderOptions::default()), render_activated(&b, &cam, &RenderOptions::default()));
}

#[test]
fn eta_at_grid_midpoint_within_propagated_bound() {
    let range = QuantRange::new(8, -4.0, -1.0).unwrap();
    let step = range.step();
    for q in [0u16, 17, 128, 254] {
        let pre = range.value(q) + 0.5 * step;
        let truth = pre.exp();
        let rec = range.value(range.code(pre)).exp();
        let bound = truth * ((0.5 * step).exp() - 1.0) + 1e-12;
        assert!((rec - truth).abs() <= bound, "code {q}");
    }
}

#[test]
fn dequantized_opacity_in_unit_interval_and_indices_checked() {
    let (_, qat) = clustered(12, 5, 3);
    let mut c = qat.quantize(&frozen_states(&qat)).unwrap();
    let act = dequantize_scene(&c).unwrap();
    assert!(act.opacities.iter().all(|a| (0.0..=1.0).contains(a)));
    for q in &act.rotations {
        assert!((q.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() <= 1e-2);
    }
    c.color_index[3] = c.color_count() as u32;
    assert!(dequantize_scene(&c).is_err());
}

#[test]
fn zero_steps_returns_input() {
    let (_, qat) = clustered(10, 6, 3);
    let c = qat.quantize(&frozen_states(&qat)).unwrap();
    let cam = front_camera(8, 10.0);
    let out = finetune(&c, &[cam], &[Image::new(8, 8)], &FinetuneConfig { steps: 0, ..FinetuneConfig::default() }).unwrap();
    assert_eq!(out, c);
}

fn float_energy(qat: &QatScene, cam: &c3gs_core::scene::Camera, up: &Image) -> f64 {
    let img = render_activated(&qat.activated(), cam, &RenderOptions::default());
    img.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
}

#[test]
fn parameter_chain_matches_finite_differences() {
    let (_, qat) = clustered(6, 9, 2);
    let cam = front_camera(24, 30.0);
    let up = random_upstream(24, 24, 4);
    let g = render_backward_activated(&qat.activated(), &cam, &up, &RenderOptions::default()).unwrap();
    let grads = qat.backprop(&g, None);
    let h = 1e-6;
    let mut checked = 0;
    let mut check = |name: &str, analytic: f64, set: &dyn Fn(&mut QatScene, f64)| {
        let mut p = qat.clone();
        set(&mut p, h);
        let mut m = qat.clone();
        set(&mut m, -h);
        let fd = (float_energy(&p, &cam, &up) - float_energy(&m, &cam, &up)) / (2.0 * h);
        let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-3);
        assert!(err <= 1e-4, "{name}: analytic {analytic} fd {fd}");
        checked += 1;
    };
    for j in [0, 1, 2, 5, 47, 48, 50] {
        check(&format!("color {j}"), grads.color_entries[j], &|q, d| q.color_entries[j] += d);
    }
    for k in 0..2 {
        for j in 0..4 {
            check(&format!("rot {k}.{j}"), grads.shape_rotations[k][j], &|q, d| q.shape_rotations[k][j] += d);
        }
        for j in 0..3 {
            check(&format!("scale {k}.{j}"), grads.shape_scales[k][j], &|q, d| q.shape_scales[k][j] += d);
        }
    }
    for i in 0..6 {
        check(&format!("eta {i}"), grads.log_eta[i], &|q, d| q.log_eta[i] += d);
        check(&format!("opacity {i}"), grads.opacity_logits[i], &|q, d| q.opacity_logits[i] += d);
    }
    assert_eq!(checked, 7 + 14 + 12);
}

#[test]
fn shared_entry_gradient_is_sum_of_isolated_contributions() {
    let (_, mut qat) = clustered(4, 12, 1);
    qat.color_index = vec![0; 4];
    qat.shape_index = vec![0; 4];
    let cam = front_camera(24, 30.0);
    let up = random_upstream(24, 24, 8);
    let g = render_backward_activated(&qat.activated(), &cam, &up, &RenderOptions::default()).unwrap();
    let joint = qat.backprop(&g, None);
    let mut summed_color = vec![0.0; joint.color_entries.len()];
    let mut summed_rot = [0.0; 4];
    for i in 0..4 {
        let mut gi = g.clone();
        for j in (0..4).filter(|&j| j != i) {
            gi.sh[j * 48..(j + 1) * 48].iter_mut().for_each(|v| *v = 0.0);
            gi.rotations[j] = [0.0; 4];
        }
        let part = qat.backprop(&gi, None);
        summed_color.iter_mut().zip(&part.color_entries).for_each(|(a, b)| *a += b);
        (0..4).for_each(|k| summed_rot[k] += part.shape_rotations[0][k]);
    }
    for (a, b) in joint.color_entries.iter().zip(&summed_color) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
    for k in 0..4 {
        assert!((joint.shape_rotations[0][k] - summed_rot[k]).abs() <= 1e-12 * summed_rot[k].abs().max(1.0));
    }
}

#[test]
fn single_gaussian_color_recovers_to_quantization_floor() {
    let mut scene = GaussianScene::empty(1);
    scene.push([0.0; 3], [1.0, 0.0, 0.0, 0.0], [0.6f64.ln(); 3], logit(0.8), &[0.6, 0.3, 0.1]);
    let ones = vec![1.0];
    let cfg = ClusterConfig { k: 1, steps: 1, batch_size: 1, ..ClusterConfig::colors() };
    let colors = cluster_colors(&scene, &ones, f64::INFINITY, &cfg).unwrap();
    let shapes = cluster_shapes(&scene, &ones, f64::INFINITY, &cfg).unwrap();
    let truth = QatScene::from_clustering(&scene, &colors, &shapes);
    let cam = front_camera(16, 20.0);
    let target = render_activated(&truth.activated(), &cam, &RenderOptions::default());

    let mut qat = truth.clone();
    qat.color_entries[0] += 0.03;
    let mut states = QuantStates::new(8, 0.99).unwrap();
    // only the perturbed codebook is free
    let lr = LearningRates { position: 0.0, opacity: 0.0, scaling: 0.0, rotation: 0.0, ..LearningRates::default() };
    let cfg = FinetuneConfig { steps: 200, lr, ..FinetuneConfig::default() };
    let report = finetune_qat(&mut qat, &mut states, &[cam.clone()], &[target.clone()], &cfg).unwrap();
    // loss of the true scene with every color coefficient half a grid step off
    let floor = {
        let mut s = QuantStates::new(8, 0.99).unwrap();
        s.observe(&truth);
        let mut off = truth.clone();
        let half = 0.5 * s.color.range().step();
        off.color_entries.iter_mut().for_each(|v| *v += half);
        let img = render_activated(&off.activated(), &cam, &RenderOptions::default());
        img.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / target.data.len() as f64
    };
    // the grid shifts with the running ranges, so the trend is checked on
    // 20-step window means with a half-step tolerance
    let means: Vec<f64> = report.losses.chunks(20).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0] + floor, "window means rose: {means:?}");
    }
    assert!(report.final_loss <= floor, "final {} floor {floor}", report.final_loss);
}
