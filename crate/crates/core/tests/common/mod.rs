#![allow(dead_code)]

use c3gs_core::render::{contributor_lists, render_activated, render_backward, RenderOptions, SceneGradients};
use c3gs_core::scene::{logit, Camera, GaussianScene, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// One scalar parameter of a scene, addressed by block and flat offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Param {
    Position(usize, usize),
    Rotation(usize, usize),
    LogScale(usize, usize),
    Opacity(usize),
    Sh(usize),
}

pub fn all_params(scene: &GaussianScene) -> Vec<Param> {
    let mut out = Vec::new();
    for i in 0..scene.len() {
        out.extend((0..3).map(|k| Param::Position(i, k)));
        out.extend((0..4).map(|k| Param::Rotation(i, k)));
        out.extend((0..3).map(|k| Param::LogScale(i, k)));
        out.push(Param::Opacity(i));
    }
    out.extend((0..scene.sh.len()).map(Param::Sh));
    out
}

pub fn param_mut(scene: &mut GaussianScene, p: Param) -> &mut f64 {
    match p {
        Param::Position(i, k) => &mut scene.positions[i][k],
        Param::Rotation(i, k) => &mut scene.rotations[i][k],
        Param::LogScale(i, k) => &mut scene.log_scales[i][k],
        Param::Opacity(i) => &mut scene.opacity_logits[i],
        Param::Sh(j) => &mut scene.sh[j],
    }
}

pub fn grad_of(g: &SceneGradients, p: Param) -> f64 {
    match p {
        Param::Position(i, k) => g.positions[i][k],
        Param::Rotation(i, k) => g.rotations[i][k],
        Param::LogScale(i, k) => g.log_scales[i][k],
        Param::Opacity(i) => g.opacity_logits[i],
        Param::Sh(j) => g.sh[j],
    }
}

pub fn weighted_energy(scene: &GaussianScene, cam: &Camera, upstream: &Image, clamp: bool) -> f64 {
    let opts = RenderOptions { clamp_colors: clamp, ..RenderOptions::default() };
    let img = render_activated(&scene.activated(), cam, &opts);
    img.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum()
}

#[derive(Debug)]
pub struct GradCheck {
    pub param: Param,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Gradients whose magnitude falls below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central-difference oracle over every scalar parameter. Parameters whose
/// ±h perturbation changes any pixel's contributor list straddle a skip
/// threshold and are left out.
pub fn finite_difference_check(
    scene: &GaussianScene,
    cam: &Camera,
    upstream: &Image,
    clamp: bool,
    h: f64,
) -> (Vec<GradCheck>, usize) {
    let analytic = render_backward(scene, cam, upstream, clamp).unwrap();
    let opts = RenderOptions { clamp_colors: clamp, ..RenderOptions::default() };
    let mut checks = Vec::new();
    let mut skipped = 0;
    for p in all_params(scene) {
        let mut plus = scene.clone();
        *param_mut(&mut plus, p) += h;
        let mut minus = scene.clone();
        *param_mut(&mut minus, p) -= h;
        if contributor_lists(&plus.activated(), cam, &opts) != contributor_lists(&minus.activated(), cam, &opts) {
            skipped += 1;
            continue;
        }
        let numeric = (weighted_energy(&plus, cam, upstream, clamp) - weighted_energy(&minus, cam, upstream, clamp))
            / (2.0 * h);
        let a = grad_of(&analytic, p);
        checks.push(GradCheck { param: p, analytic: a, numeric, rel_error: rel_error(a, numeric) });
    }
    (checks, skipped)
}

pub fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
    let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    q.map(|v| v / n)
}

/// `n` random degree-3 Gaussians clustered around the origin.
pub fn random_scene(n: usize, seed: u64, spread: f64, scale: (f64, f64)) -> GaussianScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = GaussianScene::empty(16);
    for _ in 0..n {
        let mut sh = vec![0.0; 48];
        for (j, v) in sh.iter_mut().enumerate() {
            *v = if j < 3 { rng.gen_range(0.2..1.5) } else { rng.gen_range(-0.2..0.2) };
        }
        s.push(
            std::array::from_fn(|_| rng.gen_range(-spread..spread)),
            random_quat(&mut rng),
            std::array::from_fn(|_| rng.gen_range(scale.0..scale.1).ln()),
            logit(rng.gen_range(0.3..0.9)),
            &sh,
        );
    }
    s
}

pub fn random_upstream(w: u32, h: u32, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = Image::new(w, h);
    for v in img.data.iter_mut() {
        *v = rng.gen_range(0.5..1.5);
    }
    img
}

pub fn front_camera(size: u32, focal: f64) -> Camera {
    Camera::look_at([0.3, -0.2, -5.0], [0.0; 3], [0.0, -1.0, 0.0], focal, size, size).unwrap()
}

/// Random valid compressed scene with `n` Gaussians.
pub fn random_compressed(n: usize, seed: u64) -> c3gs_core::quant::CompressedScene {
    use c3gs_core::quant::{CompressedScene, QuantRange, QuantRanges};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sh_basis = [1, 4, 9, 16][rng.gen_range(0..4)];
    let range = |rng: &mut ChaCha8Rng| {
        let bits = rng.gen_range(2..=16u8);
        let min = rng.gen_range(-2.0f32..0.5);
        QuantRange::new(bits, min, min + rng.gen_range(0.1f32..3.0)).unwrap()
    };
    let ranges = QuantRanges {
        opacity: range(&mut rng),
        eta: range(&mut rng),
        color: range(&mut rng),
        rotation: range(&mut rng),
        scale: range(&mut rng),
    };
    let codes = |rng: &mut ChaCha8Rng, count: usize, r: &QuantRange| -> Vec<u16> {
        (0..count).map(|_| rng.gen_range(0..=r.levels())).collect()
    };
    let kc = rng.gen_range(1..300usize);
    let ks = rng.gen_range(1..300usize);
    CompressedScene {
        sh_basis,
        positions: (0..n)
            .map(|_| std::array::from_fn(|_| half::f16::from_f64(rng.gen_range(-50.0..50.0)).to_bits()))
            .collect(),
        opacity: codes(&mut rng, n, &ranges.opacity),
        eta: codes(&mut rng, n, &ranges.eta),
        color_index: (0..n).map(|_| rng.gen_range(0..kc as u32)).collect(),
        shape_index: (0..n).map(|_| rng.gen_range(0..ks as u32)).collect(),
        color_codebook: codes(&mut rng, kc * sh_basis * 3, &ranges.color),
        color_clustered: rng.gen_range(0..=kc),
        shape_rotation: codes(&mut rng, ks * 4, &ranges.rotation),
        shape_scale: codes(&mut rng, ks * 3, &ranges.scale),
        shape_clustered: rng.gen_range(0..=ks),
        ranges,
    }
}

/// `n` Gaussians in the unit cube whose attributes vary smoothly with
/// position and whose codebook indices follow spatial cells.
pub fn coherent_compressed(n: usize, seed: u64) -> c3gs_core::quant::CompressedScene {
    use c3gs_core::quant::{CompressedScene, QuantRange, QuantRanges};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r8 = |min: f32, max: f32| QuantRange::new(8, min, max).unwrap();
    let ranges = QuantRanges {
        opacity: r8(0.0, 1.0),
        eta: r8(-5.0, -2.0),
        color: r8(-1.0, 2.0),
        rotation: r8(-1.0, 1.0),
        scale: r8(0.0, 1.0),
    };
    let k = 64u32;
    let positions: Vec<[f64; 3]> = (0..n).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0))).collect();
    let cell = |p: &[f64; 3]| ((p[0] * 4.0) as u32).min(3) * 16 + ((p[1] * 4.0) as u32).min(3) * 4 + ((p[2] * 4.0) as u32).min(3);
    CompressedScene {
        sh_basis: 16,
        positions: positions.iter().map(|p| p.map(|v| half::f16::from_f64(v).to_bits())).collect(),
        opacity: positions.iter().map(|p| ranges.opacity.code(0.5 + 0.4 * (3.0 * p[0]).sin() * p[1])).collect(),
        eta: positions.iter().map(|p| ranges.eta.code(-3.5 + 1.2 * (p[0] + p[2] - 1.0))).collect(),
        color_index: positions.iter().map(cell).collect(),
        shape_index: positions.iter().map(|p| (cell(p) + 7) % k).collect(),
        color_codebook: (0..k as usize * 48).map(|_| rng.gen_range(0..=255)).collect(),
        color_clustered: k as usize,
        shape_rotation: (0..k as usize * 4).map(|_| rng.gen_range(0..=255)).collect(),
        shape_scale: (0..k as usize * 3).map(|_| rng.gen_range(0..=255)).collect(),
        shape_clustered: k as usize,
        ranges,
    }
}

/// Textbook weighted Lloyd iteration from given centroids.
pub fn lloyd(data: &[f64], dim: usize, w: &[f64], init: &[f64], iters: usize) -> (Vec<f64>, Vec<u32>) {
    let k = init.len() / dim;
    let mut c = init.to_vec();
    let assign = |c: &[f64]| -> Vec<u32> {
        data.chunks(dim)
            .map(|x| {
                let mut best = 0;
                let mut bd = f64::INFINITY;
                for j in 0..k {
                    let d: f64 = (0..dim).map(|t| (x[t] - c[j * dim + t]).powi(2)).sum();
                    if d < bd {
                        bd = d;
                        best = j;
                    }
                }
                best as u32
            })
            .collect()
    };
    for _ in 0..iters {
        let a = assign(&c);
        for j in 0..k {
            let members: Vec<usize> = (0..a.len()).filter(|&i| a[i] as usize == j).collect();
            let ws: f64 = members.iter().map(|&i| w[i]).sum();
            if ws == 0.0 {
                continue;
            }
            for t in 0..dim {
                c[j * dim + t] = members.iter().map(|&i| w[i] * data[i * dim + t]).sum::<f64>() / ws;
            }
        }
    }
    let a = assign(&c);
    (c, a)
}
