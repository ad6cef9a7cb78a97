//! Seeded synthetic scenes with planted shape and color prototypes.
//!
//! Gaussians sit on a sphere. Each one takes the shape and color prototype
//! of its nearest anchor point (the first `K` Gaussians double as anchors),
//! so prototype labels form spatially coherent patches; scale magnitude and
//! opacity vary smoothly with position.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::sh::{basis_count, SH_C0};
use super::{logit, Camera, GaussianScene, SceneError};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub count: usize,
    pub shape_prototypes: usize,
    pub color_prototypes: usize,
    pub sh_degree: usize,
    /// Sphere radius.
    pub radius: f64,
    /// Mean scale magnitude η = ‖s‖.
    pub base_scale: f64,
    /// Std-dev of additive noise on quaternion components and log-scales.
    pub shape_noise: f64,
    /// Std-dev of additive noise on SH coefficients.
    pub color_noise: f64,
    /// Extra Gaussians placed far outside every orbit camera's view.
    pub invisible: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            count: 5000,
            shape_prototypes: 32,
            color_prototypes: 32,
            sh_degree: 3,
            radius: 1.0,
            base_scale: 0.05,
            shape_noise: 0.1,
            color_noise: 0.02,
            invisible: 0,
        }
    }
}

/// Generated scene plus its ground-truth structure.
#[derive(Debug, Clone)]
pub struct SynthScene {
    pub scene: GaussianScene,
    /// `(rotation, unit-norm scale)` per shape prototype.
    pub shape_prototypes: Vec<([f64; 4], [f64; 3])>,
    pub color_prototypes: Vec<Vec<f64>>,
    pub shape_labels: Vec<usize>,
    pub color_labels: Vec<usize>,
    /// Indices of the planted invisible Gaussians.
    pub invisible: Vec<usize>,
}

fn unit_quat(rng: &mut impl Rng) -> [f64; 4] {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let q: [f64; 4] = std::array::from_fn(|_| normal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let q = q.map(|v| v / n);
    if q[0] < 0.0 {
        q.map(|v| -v)
    } else {
        q
    }
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

fn nearest(anchors: &[[f64; 3]], p: &[f64; 3]) -> usize {
    let d2 = |a: &[f64; 3]| (0..3).map(|k| (a[k] - p[k]).powi(2)).sum::<f64>();
    (0..anchors.len()).min_by(|&a, &b| d2(&anchors[a]).total_cmp(&d2(&anchors[b]))).unwrap()
}

/// Deterministic for a fixed `(params, seed)`.
pub fn synth_scene(params: &SynthParams, seed: u64) -> SynthScene {
    assert!(params.count > 0 && params.shape_prototypes > 0 && params.color_prototypes > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = basis_count(params.sh_degree);
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    let shape_prototypes: Vec<([f64; 4], [f64; 3])> = (0..params.shape_prototypes)
        .map(|_| {
            let q = unit_quat(&mut rng);
            let s = normalized(std::array::from_fn(|_| rng.gen_range(-1.2f64..1.2).exp()));
            (q, s)
        })
        .collect();
    let color_prototypes: Vec<Vec<f64>> = (0..params.color_prototypes)
        .map(|_| {
            let mut c = vec![0.0; basis * 3];
            for ch in 0..3 {
                c[ch] = (rng.gen_range(0.1..0.9) - 0.5) / SH_C0;
            }
            for k in 1..basis {
                let degree = (k as f64).sqrt().floor();
                let amp = 0.15 / (degree + 1.0);
                for ch in 0..3 {
                    c[k * 3 + ch] = amp * std_normal.sample(&mut rng);
                }
            }
            c
        })
        .collect();

    let positions: Vec<[f64; 3]> = (0..params.count)
        .map(|_| {
            let d = normalized(std::array::from_fn(|_| std_normal.sample(&mut rng)));
            d.map(|v| v * params.radius)
        })
        .collect();
    let shape_anchors = &positions[..params.shape_prototypes.min(params.count)];
    let color_anchors = &positions[..params.color_prototypes.min(params.count)];

    let mut scene = GaussianScene::empty(basis);
    let mut shape_labels = Vec::with_capacity(params.count);
    let mut color_labels = Vec::with_capacity(params.count);
    for p in &positions {
        let si = nearest(shape_anchors, p);
        let ci = nearest(color_anchors, p);
        let u = p.map(|v| v / params.radius);
        let eta = params.base_scale * (1.0 + 0.3 * (3.0 * u[0] + 1.0).sin() * (2.0 * u[1]).cos());
        let opacity = 0.6 + 0.3 * (2.5 * u[2] + 0.5 * u[0]).sin();

        let (pq, ps) = shape_prototypes[si];
        let mut q = pq;
        let mut log_s = ps.map(|v| (eta * v).ln());
        if params.shape_noise > 0.0 {
            for v in q.iter_mut() {
                *v += params.shape_noise * std_normal.sample(&mut rng);
            }
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            q = q.map(|v| v / n);
            for v in log_s.iter_mut() {
                *v += params.shape_noise * std_normal.sample(&mut rng);
            }
        }
        let mut sh = color_prototypes[ci].clone();
        if params.color_noise > 0.0 {
            for v in sh.iter_mut() {
                *v += params.color_noise * std_normal.sample(&mut rng);
            }
        }
        scene.push(*p, q, log_s, logit(opacity), &sh);
        shape_labels.push(si);
        color_labels.push(ci);
    }

    let mut invisible = Vec::with_capacity(params.invisible);
    for k in 0..params.invisible {
        invisible.push(scene.len());
        let p = [0.3 * k as f64, 100.0 * params.radius, 0.0];
        let (q, s) = shape_prototypes[k % shape_prototypes.len()];
        let sh = color_prototypes[k % color_prototypes.len()].clone();
        scene.push(p, q, s.map(|v| (params.base_scale * v).ln()), logit(0.8), &sh);
        shape_labels.push(k % shape_prototypes.len());
        color_labels.push(k % color_prototypes.len());
    }

    SynthScene { scene, shape_prototypes, color_prototypes, shape_labels, color_labels, invisible }
}

/// Cameras on a ring around the origin at `distance`, alternating between
/// ±20° elevation, all looking at the origin.
pub fn orbit_cameras(count: usize, distance: f64, focal: f64, width: u32, height: u32) -> Result<Vec<Camera>, SceneError> {
    (0..count)
        .map(|k| {
            let az = std::f64::consts::TAU * k as f64 / count as f64;
            let el = if k % 2 == 0 { 20f64 } else { -20f64 }.to_radians();
            let eye = [distance * el.cos() * az.cos(), distance * el.sin(), distance * el.cos() * az.sin()];
            Camera::look_at(eye, [0.0; 3], [0.0, 1.0, 0.0], focal, width, height)
        })
        .collect()
}
