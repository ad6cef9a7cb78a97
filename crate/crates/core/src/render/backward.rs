use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use super::project::perspective_jacobian;
use super::{Frame, RenderError, RenderOptions};
use crate::scene::{rotation_matrix, sh, sigmoid, ActivatedScene, Camera, GaussianScene, Image};

/// Row bands reduced in a fixed order, so gradients do not depend on the
/// thread count.
const ROW_BANDS: usize = 16;

/// Gradients w.r.t. post-activation parameters. `covariances` holds the
/// gradient w.r.t. the six unique entries `[xx, xy, xz, yy, yz, zz]` of each
/// world-space covariance (an intermediate of the chain).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedGradients {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub sh: Vec<f64>,
    pub covariances: Vec<[f64; 6]>,
}

/// Gradients laid out like [`GaussianScene`], plus the unique covariance-entry
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGradients {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
    pub covariances: Vec<[f64; 6]>,
}

impl ActivatedGradients {
    pub fn zeros(n: usize, sh_dim: usize) -> Self {
        ActivatedGradients {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            scales: vec![[0.0; 3]; n],
            opacities: vec![0.0; n],
            sh: vec![0.0; n * sh_dim],
            covariances: vec![[0.0; 6]; n],
        }
    }
}

#[derive(Clone, Copy, Default)]
struct SplatGrad {
    color: [f64; 3],
    alpha: f64,
    center: [f64; 2],
    /// dL/dQ for the full symmetric conic; `conic[1]` is the gradient of each
    /// of the two off-diagonal entries.
    conic: [f64; 3],
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for i in 0..3 {
            self.color[i] += o.color[i];
            self.conic[i] += o.conic[i];
        }
        self.alpha += o.alpha;
        self.center[0] += o.center[0];
        self.center[1] += o.center[1];
    }
}

struct Contribution {
    splat: usize,
    a: f64,
    g: f64,
    t: f64,
    d: [f64; 2],
}

fn accumulate_2d(frame: &Frame, upstream: &Image) -> Vec<SplatGrad> {
    let n = frame.splats.len();
    let h = frame.height as usize;
    let band = h.div_ceil(ROW_BANDS).max(1);
    let partials: Vec<Vec<SplatGrad>> = (0..h.div_ceil(band))
        .into_par_iter()
        .map(|b| {
            let mut acc = vec![SplatGrad::default(); n];
            let mut scratch: Vec<Contribution> = Vec::new();
            for y in b * band..((b + 1) * band).min(h) {
                for x in 0..frame.width {
                    scratch.clear();
                    frame.composite(x, y as u32, |splat, a, g, t, d| {
                        scratch.push(Contribution { splat, a, g, t, d })
                    });
                    if scratch.is_empty() {
                        continue;
                    }
                    let up = upstream.pixel(x, y as u32);
                    // color of everything behind the current contributor
                    let mut behind = [0.0; 3];
                    for c in scratch.iter().rev() {
                        let s = &frame.splats[c.splat];
                        let gs = &mut acc[c.splat];
                        let mut d_a = 0.0;
                        for ch in 0..3 {
                            gs.color[ch] += up[ch] * c.a * c.t;
                            d_a += up[ch] * c.t * (s.rgb[ch] - behind[ch]);
                            behind[ch] = s.rgb[ch] * c.a + (1.0 - c.a) * behind[ch];
                        }
                        gs.alpha += d_a * c.g;
                        let d_power = d_a * c.a;
                        let [qa, qb, qc] = frame.conics[c.splat];
                        let [dx, dy] = c.d;
                        gs.center[0] += d_power * (qa * dx + qb * dy);
                        gs.center[1] += d_power * (qb * dx + qc * dy);
                        gs.conic[0] += d_power * (-0.5 * dx * dx);
                        gs.conic[1] += d_power * (-0.5 * dx * dy);
                        gs.conic[2] += d_power * (-0.5 * dy * dy);
                    }
                }
            }
            acc
        })
        .collect();
    let mut total = vec![SplatGrad::default(); n];
    for part in &partials {
        for (t, p) in total.iter_mut().zip(part) {
            t.add(p);
        }
    }
    total
}

/// Partial derivatives of the rotation matrix entries w.r.t. the unit
/// quaternion components `(w, x, y, z)`.
fn rotation_partials(n: [f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = n;
    let dw = Matrix3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Matrix3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Matrix3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Matrix3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    [dw, dx, dy, dz]
}

struct GaussianGrad {
    position: [f64; 3],
    rotation: [f64; 4],
    scale: [f64; 3],
    opacity: f64,
    sh: Vec<f64>,
    covariance: [f64; 6],
}

fn chain_to_3d(
    scene: &ActivatedScene,
    cam: &Camera,
    opts: &RenderOptions,
    i: usize,
    g2: &SplatGrad,
    clamp_mask: [bool; 3],
) -> GaussianGrad {
    let w = cam.rotation();
    let x = Vector3::from(scene.positions[i]);
    let t = cam.to_camera(&x);

    // Σ = M Mᵀ with M = R·diag(s)
    let q = scene.rotations[i];
    let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n = q.map(|v| v / qn);
    let r = rotation_matrix(&q);
    let s = scene.scales[i];
    let m = r * Matrix3::from_diagonal(&Vector3::from(s));
    let sigma = m * m.transpose();

    let j = perspective_jacobian(&t, cam.fx, cam.fy);
    let tw: Matrix2x3<f64> = j * w;
    let s2 = tw * sigma * tw.transpose();
    let cov2 = Matrix2::new(s2[(0, 0)] + opts.dilation, s2[(0, 1)], s2[(1, 0)], s2[(1, 1)] + opts.dilation);
    let conic = cov2.try_inverse().expect("splat survived the singularity check");

    // conic → 2D covariance → 3D covariance and projection matrix
    let d_conic = Matrix2::new(g2.conic[0], g2.conic[1], g2.conic[1], g2.conic[2]);
    let d_cov2 = -(conic * d_conic * conic);
    let d_sigma = tw.transpose() * d_cov2 * tw;
    let d_tw = 2.0 * d_cov2 * tw * sigma;
    let d_j = d_tw * w.transpose();

    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let [du, dv] = g2.center;
    let mut d_t = Vector3::new(du * fx * iz, dv * fy * iz, -du * fx * t.x * iz2 - dv * fy * t.y * iz2);
    d_t.z += d_j[(0, 0)] * (-fx * iz2) + d_j[(0, 2)] * (2.0 * fx * t.x * iz3);
    d_t.x += d_j[(0, 2)] * (-fx * iz2);
    d_t.z += d_j[(1, 1)] * (-fy * iz2) + d_j[(1, 2)] * (2.0 * fy * t.y * iz3);
    d_t.y += d_j[(1, 2)] * (-fy * iz2);
    let mut d_x = w.transpose() * d_t;

    // color: SH coefficients and view direction
    let basis_n = scene.sh_basis;
    let v = x - cam.center();
    let vn = v.norm();
    let dir = [v.x / vn, v.y / vn, v.z / vn];
    let y = sh::basis(dir, basis_n);
    let dy = sh::basis_gradient(dir, basis_n);
    let coeffs = scene.sh_of(i);
    let d_color: [f64; 3] = std::array::from_fn(|ch| if clamp_mask[ch] { 0.0 } else { g2.color[ch] });
    let mut d_sh = vec![0.0; basis_n * 3];
    let mut d_dir = Vector3::zeros();
    for k in 0..basis_n {
        let mut w_k = 0.0;
        for ch in 0..3 {
            d_sh[k * 3 + ch] = d_color[ch] * y[k];
            w_k += d_color[ch] * coeffs[k * 3 + ch];
        }
        d_dir += Vector3::from(dy[k]) * w_k;
    }
    let dirv = Vector3::from(dir);
    d_x += (d_dir - dirv * dirv.dot(&d_dir)) / vn;

    // Σ → (R, s) → quaternion
    let d_m = 2.0 * d_sigma * m;
    let mut d_scale = [0.0; 3];
    let mut d_r = Matrix3::zeros();
    for row in 0..3 {
        for col in 0..3 {
            d_scale[col] += d_m[(row, col)] * r[(row, col)];
            d_r[(row, col)] = d_m[(row, col)] * s[col];
        }
    }
    let partials = rotation_partials(n);
    let d_n: [f64; 4] = std::array::from_fn(|k| d_r.component_mul(&partials[k]).sum());
    let dot: f64 = (0..4).map(|k| d_n[k] * n[k]).sum();
    let d_q = std::array::from_fn(|k| (d_n[k] - n[k] * dot) / qn);

    GaussianGrad {
        position: [d_x.x, d_x.y, d_x.z],
        rotation: d_q,
        scale: d_scale,
        opacity: g2.alpha,
        sh: d_sh,
        covariance: [
            d_sigma[(0, 0)],
            d_sigma[(0, 1)] + d_sigma[(1, 0)],
            d_sigma[(0, 2)] + d_sigma[(2, 0)],
            d_sigma[(1, 1)],
            d_sigma[(1, 2)] + d_sigma[(2, 1)],
            d_sigma[(2, 2)],
        ],
    }
}

pub(crate) fn backward_frame(
    frame: &Frame,
    scene: &ActivatedScene,
    cam: &Camera,
    upstream: &Image,
    opts: &RenderOptions,
) -> ActivatedGradients {
    let grads2d = accumulate_2d(frame, upstream);
    let cam_center = cam.center();
    let per_splat: Vec<(usize, GaussianGrad)> = frame
        .splats
        .par_iter()
        .zip(grads2d.par_iter())
        .map(|(s, g2)| {
            let i = s.source_index;
            let clamp_mask: [bool; 3] = if opts.clamp_colors {
                let v = Vector3::from(scene.positions[i]) - cam_center;
                let dir = [v.x / v.norm(), v.y / v.norm(), v.z / v.norm()];
                let raw = sh::sh_eval(scene.sh_of(i), dir, false);
                raw.map(|c| c < 0.0)
            } else {
                [false; 3]
            };
            (i, chain_to_3d(scene, cam, opts, i, g2, clamp_mask))
        })
        .collect();

    let d = scene.sh_dim();
    let mut out = ActivatedGradients::zeros(scene.len(), d);
    for (i, g) in per_splat {
        out.positions[i] = g.position;
        out.rotations[i] = g.rotation;
        out.scales[i] = g.scale;
        out.opacities[i] = g.opacity;
        out.sh[i * d..(i + 1) * d].copy_from_slice(&g.sh);
        out.covariances[i] = g.covariance;
    }
    out
}

pub(crate) fn check_dims(cam: &Camera, upstream: &Image) -> Result<(), RenderError> {
    if upstream.width != cam.width || upstream.height != cam.height {
        return Err(RenderError::DimensionMismatch(upstream.width, upstream.height, cam.width, cam.height));
    }
    Ok(())
}

/// Reverse-mode gradients of `⟨upstream, render(scene)⟩` w.r.t. the
/// post-activation parameters.
pub fn render_backward_activated(
    scene: &ActivatedScene,
    cam: &Camera,
    upstream: &Image,
    opts: &RenderOptions,
) -> Result<ActivatedGradients, RenderError> {
    check_dims(cam, upstream)?;
    let frame = Frame::build(scene, cam, opts);
    Ok(backward_frame(&frame, scene, cam, upstream, opts))
}

/// Gradients w.r.t. the storage parameters of `scene`. `clamp` selects
/// whether the forward clamps SH colors at zero.
pub fn render_backward(
    scene: &GaussianScene,
    cam: &Camera,
    upstream: &Image,
    clamp: bool,
) -> Result<SceneGradients, RenderError> {
    let opts = RenderOptions { clamp_colors: clamp, ..RenderOptions::default() };
    let act = scene.activated();
    let g = render_backward_activated(&act, cam, upstream, &opts)?;
    Ok(SceneGradients {
        positions: g.positions,
        rotations: g.rotations,
        log_scales: g
            .scales
            .iter()
            .zip(&act.scales)
            .map(|(d, s)| [d[0] * s[0], d[1] * s[1], d[2] * s[2]])
            .collect(),
        opacity_logits: g
            .opacities
            .iter()
            .zip(&scene.opacity_logits)
            .map(|(d, &l)| d * sigmoid(l) * sigmoid(-l))
            .collect(),
        sh: g.sh,
        covariances: g.covariances,
    })
}
