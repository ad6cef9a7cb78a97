//! Deterministic CPU reference renderer with an exact reverse-mode backward
//! pass.
//!
//! Gaussians are projected with the affine EWA approximation, depth sorted
//! (ties broken by source index) and composited front to back per pixel. The
//! backward pass replays exactly the same contributor lists, so gradients are
//! those of the computed forward, skip thresholds included.

mod backward;
mod project;

pub use backward::{render_backward, render_backward_activated, ActivatedGradients, SceneGradients};
pub use project::{ellipse_intersects_rect, project, Projection};

use nalgebra::{Matrix2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::scene::{covariance_from, sh, ActivatedScene, Camera, GaussianScene, Image};

/// √χ²₀.₉₉ with two degrees of freedom: the 99% confidence ellipse radius in
/// standard deviations.
pub const CONFIDENCE_RADIUS: f64 = 3.0349;
/// Contributions with effective alpha below this are skipped.
pub const MIN_ALPHA: f64 = 1.0 / 255.0;
/// A pixel stops compositing once its transmittance drops below this.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// 2D covariances with a determinant at or below this are skipped.
pub const SINGULAR_DET: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(u32, u32, u32, u32),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    /// Added to both diagonal entries of every 2D covariance, in px².
    pub dilation: f64,
    /// Camera-space depth below which Gaussians are culled.
    pub near: f64,
    /// Clamp SH colors at zero (disabled for sensitivity passes).
    pub clamp_colors: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions { dilation: 0.3, near: 0.01, clamp_colors: true }
    }
}

/// A Gaussian after projection to screen space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub screen_center: [f64; 2],
    /// `[a, b, c]` of the symmetric 2×2 covariance `[[a, b], [b, c]]`, px².
    pub cov2d: [f64; 3],
    pub view_depth: f64,
    pub rgb: [f64; 3],
    pub alpha: f64,
    pub source_index: usize,
}

impl Splat2D {
    /// Inverse 2D covariance as `[A, B, C]`.
    pub fn conic(&self) -> [f64; 3] {
        let [a, b, c] = self.cov2d;
        let det = a * c - b * b;
        [c / det, -b / det, a / det]
    }
}

/// Splats of one view, sorted front to back, plus per-pixel candidate lists
/// (indices into `splats`, ascending, hence depth ordered).
pub(crate) struct Frame {
    pub splats: Vec<Splat2D>,
    pub conics: Vec<[f64; 3]>,
    pub pixel_offsets: Vec<usize>,
    pub pixel_splats: Vec<u32>,
    pub width: u32,
    pub height: u32,
}

fn view_direction(position: &Vector3<f64>, cam_center: &Vector3<f64>) -> [f64; 3] {
    let v = position - cam_center;
    let n = v.norm();
    [v.x / n, v.y / n, v.z / n]
}

pub(crate) fn preprocess(scene: &ActivatedScene, cam: &Camera, opts: &RenderOptions) -> Vec<Splat2D> {
    let cam_center = cam.center();
    let mut splats: Vec<Splat2D> = (0..scene.len())
        .into_par_iter()
        .filter_map(|i| {
            let cov = covariance_from(&scene.rotations[i], &scene.scales[i]);
            let proj = project(&cov, scene.positions[i], cam, opts.dilation, opts.near)?;
            let [a, b, c] = proj.cov2d;
            if a * c - b * b <= SINGULAR_DET {
                return None;
            }
            let conic = Matrix2::new(a, b, b, c).try_inverse()?;
            if !ellipse_intersects_rect(proj.center, &conic, CONFIDENCE_RADIUS, cam.width, cam.height) {
                return None;
            }
            let dir = view_direction(&Vector3::from(scene.positions[i]), &cam_center);
            let rgb = sh::sh_eval(scene.sh_of(i), dir, opts.clamp_colors);
            Some(Splat2D {
                screen_center: proj.center,
                cov2d: proj.cov2d,
                view_depth: proj.depth,
                rgb,
                alpha: scene.opacities[i],
                source_index: i,
            })
        })
        .collect();
    splats.sort_by(|p, q| {
        p.view_depth.total_cmp(&q.view_depth).then(p.source_index.cmp(&q.source_index))
    });
    splats
}

/// Inclusive pixel range whose centers fall inside `[lo, hi]`.
fn pixel_span(lo: f64, hi: f64, size: u32) -> Option<(u32, u32)> {
    let first = (lo - 0.5).ceil().max(0.0);
    let last = (hi - 0.5).floor().min(size as f64 - 1.0);
    (first <= last).then_some((first as u32, last as u32))
}

impl Frame {
    pub fn build(scene: &ActivatedScene, cam: &Camera, opts: &RenderOptions) -> Frame {
        let splats = preprocess(scene, cam, opts);
        let conics: Vec<[f64; 3]> = splats.iter().map(Splat2D::conic).collect();
        let (w, h) = (cam.width, cam.height);
        let spans: Vec<Option<((u32, u32), (u32, u32))>> = splats
            .iter()
            .map(|s| {
                let rx = CONFIDENCE_RADIUS * s.cov2d[0].sqrt();
                let ry = CONFIDENCE_RADIUS * s.cov2d[2].sqrt();
                let [cx, cy] = s.screen_center;
                Some((pixel_span(cx - rx, cx + rx, w)?, pixel_span(cy - ry, cy + ry, h)?))
            })
            .collect();

        let npix = w as usize * h as usize;
        let mut counts = vec![0usize; npix + 1];
        for ((x0, x1), (y0, y1)) in spans.iter().flatten() {
            for y in *y0..=*y1 {
                for x in *x0..=*x1 {
                    counts[y as usize * w as usize + x as usize + 1] += 1;
                }
            }
        }
        for i in 0..npix {
            counts[i + 1] += counts[i];
        }
        let mut cursor = counts.clone();
        let mut pixel_splats = vec![0u32; counts[npix]];
        for (k, span) in spans.iter().enumerate() {
            let Some(((x0, x1), (y0, y1))) = span else { continue };
            for y in *y0..=*y1 {
                for x in *x0..=*x1 {
                    let p = y as usize * w as usize + x as usize;
                    pixel_splats[cursor[p]] = k as u32;
                    cursor[p] += 1;
                }
            }
        }
        Frame { splats, conics, pixel_offsets: counts, pixel_splats, width: w, height: h }
    }

    pub fn candidates(&self, pixel: usize) -> &[u32] {
        &self.pixel_splats[self.pixel_offsets[pixel]..self.pixel_offsets[pixel + 1]]
    }

    /// Walks the contributors of one pixel in compositing order, calling
    /// `visit(splat, a, gaussian, transmittance_before, d)` for each one.
    /// Returns the final transmittance.
    #[inline]
    pub fn composite(
        &self,
        x: u32,
        y: u32,
        mut visit: impl FnMut(usize, f64, f64, f64, [f64; 2]),
    ) -> f64 {
        let pixel = y as usize * self.width as usize + x as usize;
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        let r2 = CONFIDENCE_RADIUS * CONFIDENCE_RADIUS;
        let mut t = 1.0;
        for &k in self.candidates(pixel) {
            let k = k as usize;
            let s = &self.splats[k];
            let [qa, qb, qc] = self.conics[k];
            let d = [px - s.screen_center[0], py - s.screen_center[1]];
            let m = qa * d[0] * d[0] + 2.0 * qb * d[0] * d[1] + qc * d[1] * d[1];
            if m > r2 {
                continue;
            }
            let g = (-0.5 * m).exp();
            let a = s.alpha * g;
            if a < MIN_ALPHA {
                continue;
            }
            visit(k, a, g, t, d);
            t *= 1.0 - a;
            if t < MIN_TRANSMITTANCE {
                break;
            }
        }
        t
    }

    pub fn render(&self) -> Image {
        let mut img = Image::new(self.width, self.height);
        let w = self.width as usize;
        img.data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| {
            for x in 0..w {
                let mut c = [0.0; 3];
                self.composite(x as u32, y as u32, |k, a, _, t, _| {
                    let rgb = self.splats[k].rgb;
                    for ch in 0..3 {
                        c[ch] += rgb[ch] * a * t;
                    }
                });
                row[x * 3..x * 3 + 3].copy_from_slice(&c);
            }
        });
        img
    }
}

/// Indices (ascending) of Gaussians in front of the near plane whose 99%
/// ellipse overlaps the image rectangle.
pub fn cull(scene: &GaussianScene, cam: &Camera) -> Vec<usize> {
    let opts = RenderOptions::default();
    let mut idx: Vec<usize> =
        preprocess(&scene.activated(), cam, &opts).iter().map(|s| s.source_index).collect();
    idx.sort_unstable();
    idx
}

/// Projected, culled and depth-sorted splats of a view.
pub fn splats(scene: &ActivatedScene, cam: &Camera, opts: &RenderOptions) -> Vec<Splat2D> {
    preprocess(scene, cam, opts)
}

/// Renders with default options.
pub fn render(scene: &GaussianScene, cam: &Camera) -> Image {
    render_activated(&scene.activated(), cam, &RenderOptions::default())
}

pub fn render_activated(scene: &ActivatedScene, cam: &Camera, opts: &RenderOptions) -> Image {
    Frame::build(scene, cam, opts).render()
}

/// Renders once and back-propagates the upstream gradient that `loss`
/// derives from the image, sharing the projection and binning work.
pub fn render_with_gradients(
    scene: &ActivatedScene,
    cam: &Camera,
    opts: &RenderOptions,
    loss: impl FnOnce(&Image) -> Image,
) -> Result<(Image, ActivatedGradients), RenderError> {
    let frame = Frame::build(scene, cam, opts);
    let img = frame.render();
    let upstream = loss(&img);
    backward::check_dims(cam, &upstream)?;
    let grads = backward::backward_frame(&frame, scene, cam, &upstream, opts);
    Ok((img, grads))
}

/// Source indices of the Gaussians composited at each pixel, in order.
pub fn contributor_lists(scene: &ActivatedScene, cam: &Camera, opts: &RenderOptions) -> Vec<Vec<usize>> {
    let frame = Frame::build(scene, cam, opts);
    let mut out = Vec::with_capacity(cam.pixel_count());
    for y in 0..cam.height {
        for x in 0..cam.width {
            let mut list = Vec::new();
            frame.composite(x, y, |k, _, _, _, _| list.push(frame.splats[k].source_index));
            out.push(list);
        }
    }
    out
}

/// Per-pixel sum of `a_i·T_i` (total opacity), for diagnostics.
pub fn coverage(scene: &ActivatedScene, cam: &Camera, opts: &RenderOptions) -> Vec<f64> {
    let frame = Frame::build(scene, cam, opts);
    let mut out = vec![0.0; cam.pixel_count()];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let mut acc = 0.0;
            frame.composite(x, y, |_, a, _, t, _| acc += a * t);
            out[y as usize * cam.width as usize + x as usize] = acc;
        }
    }
    out
}

/// Peak signal-to-noise ratio with peak 1.0; identical images give `+∞`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, RenderError> {
    if a.width != b.width || a.height != b.height {
        return Err(RenderError::DimensionMismatch(a.width, a.height, b.width, b.height));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}
