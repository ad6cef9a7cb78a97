//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Each criterion's wall-clock limit is part of its check.

mod common;

use std::time::{Duration, Instant};

use c3gs_core::cluster::{weighted_objective, ClusterConfig, Euclidean, KMeans, UnitTraceCovariance, UpdateRule};
use c3gs_core::codec::{decode, encode, encode_with, morton_key, morton_order, Aabb, Ordering};
use c3gs_core::finetune::LearningRates;
use c3gs_core::pipeline::{compress, PipelineConfig, Stage};
use c3gs_core::quant::{fake_quantize, fake_quantize_backward, QuantState};
use c3gs_core::render::render;
use c3gs_core::scene::synth::{orbit_cameras, synth_scene, SynthParams};
use c3gs_core::scene::{covariance_from, eigendecompose_covariance, normalize_covariance, Covariance3};
use c3gs_core::sensitivity::{parameter_sensitivity, prune_zero_sensitivity};
use common::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn run(name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let in_time = elapsed < limit;
    let pass = out.pass && in_time;
    println!(
        "{} {name}: {} [{:.2} s, limit {} s{}]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64(),
        limit.as_secs(),
        if in_time { "" } else { ", over time" }
    );
    pass
}

fn random_scale(rng: &mut ChaCha8Rng) -> [f64; 3] {
    std::array::from_fn(|_| rng.gen_range((0.01f64).ln()..(3.0f64).ln()).exp())
}

fn covariance_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut trace_err: f64 = 0.0;
    let mut idem_err: f64 = 0.0;
    let mut units = Vec::with_capacity(10_000);
    for _ in 0..10_000 {
        let q = random_quat(&mut rng);
        let s = random_scale(&mut rng);
        let c = covariance_from(&q, &s);
        let norm2: f64 = s.iter().map(|v| v * v).sum();
        trace_err = trace_err.max((c.trace() - norm2).abs() / norm2);
        let (unit, _) = normalize_covariance(&c).unwrap();
        let (again, eta) = normalize_covariance(&unit).unwrap();
        idem_err = idem_err.max(again.frobenius_distance(&unit)).max((eta - 1.0).abs());
        units.push(unit);
    }
    let mut mean_err: f64 = 0.0;
    for group in units.chunks(10) {
        let w: Vec<f64> = group.iter().map(|_| rng.gen_range(0.01..5.0)).collect();
        let total: f64 = w.iter().sum();
        let mut mean = [0.0; 6];
        for (c, wi) in group.iter().zip(&w) {
            for k in 0..6 {
                mean[k] += wi * c.0[k] / total;
            }
        }
        mean_err = mean_err.max((UnitTraceCovariance::trace(&mean) - 1.0).abs());
    }
    check(
        trace_err <= 1e-9 && mean_err <= 1e-5 && idem_err <= 1e-12,
        format!(
            "10000 samples; max rel |Tr-|s|^2| {trace_err:.2e} (<= 1e-9), weighted-mean trace error {mean_err:.2e} (<= 1e-5), normalization idempotence error {idem_err:.2e}"
        ),
    )
}

fn eigen_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let c = covariance_from(&random_quat(&mut rng), &random_scale(&mut rng));
        let (q, s) = eigendecompose_covariance(&c);
        let back: Covariance3 = covariance_from(&q, &s);
        worst = worst.max(back.frobenius_distance(&c) / c.frobenius());
    }
    check(worst <= 1e-5, format!("1000 covariances; max relative Frobenius error {worst:.2e} (<= 1e-5)"))
}

fn gradient_check() -> Outcome {
    let mut worst8: f64 = 0.0;
    let mut checked8 = 0;
    for seed in [3, 17] {
        let scene = random_scene(8, seed, 0.6, (0.15, 0.45));
        let (checks, _) = finite_difference_check(&scene, &front_camera(32, 40.0), &random_upstream(32, 32, seed + 7), true, 1e-5);
        checked8 += checks.len();
        worst8 = checks.iter().map(|c| c.rel_error).fold(worst8, f64::max);
    }
    let mut worst1: f64 = 0.0;
    for seed in 0..4 {
        let scene = random_scene(1, seed, 0.2, (0.4, 0.9));
        for clamp in [true, false] {
            let (checks, _) = finite_difference_check(&scene, &front_camera(8, 12.0), &random_upstream(8, 8, seed + 100), clamp, 1e-5);
            worst1 = checks.iter().map(|c| c.rel_error).fold(worst1, f64::max);
        }
    }
    check(
        worst8 <= 1e-3 && worst1 <= 1e-6 && checked8 > 2 * 8 * 11,
        format!("8 Gaussians 32x32: {checked8} parameters, max rel error {worst8:.2e} (<= 1e-3); 1 Gaussian 8x8: max rel error {worst1:.2e} (<= 1e-6)"),
    )
}

fn kmeans_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.gen_range(8..=64);
        let dim = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=4);
        let data: Vec<f64> = (0..m * dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let w: Vec<f64> = (0..m).map(|_| rng.gen_range(0.1..2.0)).collect();
        let cfg = ClusterConfig { k, steps: 10, batch_size: m, decay: 0.8, seed, update: UpdateRule::Exact, reseed_idle: false };
        let mut run = KMeans::new(&data, dim, &w, &cfg, &Euclidean).unwrap();
        let init = run.centroids().to_vec();
        for _ in 0..cfg.steps {
            run.step();
        }
        let (c_ref, a_ref) = lloyd(&data, dim, &w, &init, cfg.steps);
        let ours = weighted_objective(&data, dim, &w, run.centroids(), &run.assign_all());
        let oracle = weighted_objective(&data, dim, &w, &c_ref, &a_ref);
        worst = worst.max((ours - oracle).abs() / oracle.max(1.0));
    }
    check(worst <= 1e-9, format!("20 seeds, M <= 64, D <= 4, K <= 4; max objective deviation {worst:.2e} (<= 1e-9)"))
}

fn quantizer() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bound_ok = true;
    let mut worst_ratio: f64 = 0.0;
    for (bits, min, max) in [(8u8, 0.0, 1.0), (8, -3.7, 12.25), (2, -1.0, 1.0), (16, 1e-3, 2e-3), (5, -40.0, -39.0)] {
        let mut s = QuantState::new(bits).unwrap();
        s.observe(&[min, max]);
        let half_step = (max - min) / (2.0 * ((1u32 << bits) - 1) as f64);
        let samples: Vec<f64> = (0..200_000).map(|_| rng.gen_range(min..=max)).collect();
        for (p, q) in samples.iter().zip(fake_quantize(&samples, &s)) {
            let e = (q - p).abs();
            bound_ok &= e <= half_step + 1e-12;
            worst_ratio = worst_ratio.max(e / half_step);
        }
    }
    let g: Vec<f64> = (0..100_000).map(|_| rng.gen_range(-1e3..1e3) * rng.gen::<f64>().powi(9)).collect();
    let ste = fake_quantize_backward(&g).iter().zip(&g).all(|(a, b)| a.to_bits() == b.to_bits());
    let mut idempotent = true;
    for _ in 0..10_000 {
        let bits = rng.gen_range(2..=16u8);
        let lo = rng.gen_range(-100.0..100.0);
        let mut s = QuantState::new(bits).unwrap();
        s.observe(&[lo, lo + rng.gen_range(1e-3..50.0)]);
        s.freeze();
        for _ in 0..20 {
            let once = s.fake_quantize(rng.gen_range(-200.0..200.0));
            idempotent &= s.fake_quantize(once) == once;
        }
    }
    check(
        bound_ok && ste && idempotent,
        format!("1000000 samples, max error {worst_ratio:.4} half-steps; straight-through bitwise identity {ste}; frozen idempotence {idempotent}"),
    )
}

fn codec() -> Outcome {
    let mut exact = 0;
    for seed in 0..50u64 {
        let c = random_compressed((seed as usize * 37) % 400, seed);
        let plain_ok = decode(&encode_with(&c, Ordering::AsIs).unwrap()).unwrap() == c;
        let decoded = c.decoded_positions();
        let order = morton_order(&decoded, &Aabb::from_points(&decoded));
        let morton_ok = decode(&encode(&c).unwrap()).unwrap() == c.permuted(&order);
        exact += (plain_ok && morton_ok) as usize;
    }
    let key = morton_key([1, 2, 3]);
    let c = coherent_compressed(10_000, 7);
    let morton = encode(&c).unwrap().len();
    let mut perm: Vec<usize> = (0..c.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(99));
    let shuffled = encode_with(&c.permuted(&perm), Ordering::AsIs).unwrap().len();
    let gain = 1.0 - morton as f64 / shuffled as f64;
    check(
        exact == 50 && key == 53 && gain >= 0.05,
        format!(
            "{exact}/50 fixtures bit-exact; morton_key(1,2,3) = {key}; Morton {morton} vs shuffled {shuffled} bytes ({:.1}% smaller, >= 5%)",
            gain * 100.0
        ),
    )
}

fn end_to_end() -> Outcome {
    let synth = synth_scene(&SynthParams::default(), 1);
    let cams = orbit_cameras(10, 4.0, 70.0, 64, 64).unwrap();
    let config = PipelineConfig {
        k_color: 64,
        k_shape: 64,
        beta_color: f64::INFINITY,
        beta_shape: f64::INFINITY,
        finetune_steps: 200,
        lr: LearningRates::short_schedule(),
        lr_final_factor: 0.1,
        seed: 0,
        ..PipelineConfig::default()
    };
    let (_, report) = compress(&synth.scene, &cams, None, &config).unwrap();
    let last = report.row(Stage::MortonOrder);
    let tuned = report.row(Stage::QaFinetune);
    let gain = tuned.training_psnr - report.quantized_training_psnr;
    check(
        last.heldout_psnr >= 40.0 && report.ratio >= 10.0 && gain >= 2.0,
        format!(
            "N = {}, {} training views; held-out PSNR {:.2} dB (>= 40), ratio {:.2}x (>= 10), fine-tune gain {gain:.2} dB on training views (>= 2; {:.2} -> {:.2}); held-out before/after fine-tune {:.2} / {:.2} dB",
            synth.scene.len(),
            report.training_views.len(),
            last.heldout_psnr,
            report.ratio,
            report.quantized_training_psnr,
            tuned.training_psnr,
            report.quantized_heldout_psnr,
            tuned.heldout_psnr,
        ),
    )
}

fn pruning() -> Outcome {
    let params = SynthParams { count: 600, invisible: 7, ..SynthParams::default() };
    let synth = synth_scene(&params, 11);
    let cams = orbit_cameras(6, 4.0, 50.0, 48, 48).unwrap();
    let field = parameter_sensitivity(&synth.scene, &cams).unwrap();
    let pruned = prune_zero_sensitivity(&synth.scene, &field);
    let planted = synth.invisible.iter().all(|i| !pruned.kept.contains(i));
    let identical = cams.iter().all(|c| render(&synth.scene, c) == render(&pruned.scene, c));
    check(
        pruned.removed_count == 7 && planted && identical,
        format!("{} removed of 7 planted, planted ones removed {planted}, renders bit-identical {identical}", pruned.removed_count),
    )
}

fn main() {
    let secs = Duration::from_secs;
    let results = [
        run("covariance_invariants", secs(5), covariance_invariants),
        run("eigen_round_trip", secs(5), eigen_round_trip),
        run("renderer_gradient_check", secs(60), gradient_check),
        run("weighted_kmeans_oracle", secs(10), kmeans_oracle),
        run("quantizer", secs(5), quantizer),
        run("codec", secs(30), codec),
        run("end_to_end_pipeline", secs(600), end_to_end),
        run("pruning", secs(60), pruning),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
