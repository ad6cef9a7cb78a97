//! Parameter sensitivities: the view-summed absolute gradient of total image
//! energy (sum of all RGB components) w.r.t. every scene parameter,
//! normalized by the total pixel count.

use rayon::prelude::*;
use thiserror::Error;

use crate::render::{render_backward, SceneGradients};
use crate::scene::{Camera, GaussianScene, Image};

/// Default threshold above which SH vectors bypass clustering.
pub const DEFAULT_BETA_COLOR: f64 = 6e-7;
/// Default threshold above which covariances bypass clustering.
pub const DEFAULT_BETA_SHAPE: f64 = 3e-6;

const FIELD_MAGIC: &[u8; 4] = b"C3SF";
const FIELD_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum SensitivityError {
    #[error("no cameras given")]
    NoCameras,
    #[error("sensitivity blob: {0}")]
    Format(String),
}

/// Per-scalar sensitivities, laid out like the scene. `covariances` holds
/// the sensitivities of the six unique world-space covariance entries.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityField {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
    pub covariances: Vec<[f64; 6]>,
    pub sh_basis: usize,
    pub views: usize,
    pub total_pixels: u64,
}

impl SensitivityField {
    fn zeros(n: usize, sh_basis: usize) -> Self {
        SensitivityField {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            sh: vec![0.0; n * sh_basis * 3],
            covariances: vec![[0.0; 6]; n],
            sh_basis,
            views: 0,
            total_pixels: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    fn add_abs(&mut self, g: &SceneGradients) {
        fn acc<const N: usize>(dst: &mut [[f64; N]], src: &[[f64; N]]) {
            for (d, s) in dst.iter_mut().zip(src) {
                for k in 0..N {
                    d[k] += s[k].abs();
                }
            }
        }
        acc(&mut self.positions, &g.positions);
        acc(&mut self.rotations, &g.rotations);
        acc(&mut self.log_scales, &g.log_scales);
        acc(&mut self.covariances, &g.covariances);
        for (d, s) in self.opacity_logits.iter_mut().zip(&g.opacity_logits) {
            *d += s.abs();
        }
        for (d, s) in self.sh.iter_mut().zip(&g.sh) {
            *d += s.abs();
        }
    }

    fn scale_all(&mut self, k: f64) {
        self.positions.iter_mut().flatten().for_each(|v| *v *= k);
        self.rotations.iter_mut().flatten().for_each(|v| *v *= k);
        self.log_scales.iter_mut().flatten().for_each(|v| *v *= k);
        self.covariances.iter_mut().flatten().for_each(|v| *v *= k);
        self.opacity_logits.iter_mut().for_each(|v| *v *= k);
        self.sh.iter_mut().for_each(|v| *v *= k);
    }

    /// Color-vector sensitivity per Gaussian: max over its SH coefficients.
    pub fn color_sensitivity(&self) -> Vec<f64> {
        group_max(&self.sh, self.sh_basis * 3)
    }

    /// Shape-vector sensitivity per Gaussian: max over its six covariance
    /// entries.
    pub fn shape_sensitivity(&self) -> Vec<f64> {
        self.covariances.iter().map(|c| c.iter().copied().fold(0.0, f64::max)).collect()
    }

    /// Field restricted to (and reordered by) `indices`.
    pub fn select(&self, indices: &[usize]) -> SensitivityField {
        let d = self.sh_basis * 3;
        let mut sh = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            sh.extend_from_slice(&self.sh[i * d..(i + 1) * d]);
        }
        SensitivityField {
            positions: indices.iter().map(|&i| self.positions[i]).collect(),
            rotations: indices.iter().map(|&i| self.rotations[i]).collect(),
            log_scales: indices.iter().map(|&i| self.log_scales[i]).collect(),
            opacity_logits: indices.iter().map(|&i| self.opacity_logits[i]).collect(),
            sh,
            covariances: indices.iter().map(|&i| self.covariances[i]).collect(),
            sh_basis: self.sh_basis,
            views: self.views,
            total_pixels: self.total_pixels,
        }
    }

    /// Flat little-endian dump: a 28-byte header (`C3SF`, version u16,
    /// reserved u16, N u32, SH basis count u32, views u32, total pixels u64)
    /// followed by `f32` values per Gaussian in the order position(3),
    /// rotation(4), log-scale(3), opacity(1), SH(basis·3), covariance(6).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(FIELD_MAGIC);
        out.extend_from_slice(&FIELD_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.sh_basis as u32).to_le_bytes());
        out.extend_from_slice(&(self.views as u32).to_le_bytes());
        out.extend_from_slice(&self.total_pixels.to_le_bytes());
        let d = self.sh_basis * 3;
        for i in 0..self.len() {
            let values = self.positions[i]
                .iter()
                .chain(&self.rotations[i])
                .chain(&self.log_scales[i])
                .chain(std::iter::once(&self.opacity_logits[i]))
                .chain(&self.sh[i * d..(i + 1) * d])
                .chain(&self.covariances[i]);
            for v in values {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SensitivityError> {
        let bad = |m: &str| SensitivityError::Format(m.to_string());
        if bytes.len() < 28 || &bytes[..4] != FIELD_MAGIC {
            return Err(bad("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        if u16::from_le_bytes([bytes[4], bytes[5]]) != FIELD_VERSION {
            return Err(bad("unsupported version"));
        }
        let n = u32_at(8);
        let basis = u32_at(12);
        let views = u32_at(16);
        let total_pixels = u64::from_le_bytes(bytes[20..28].try_into().unwrap());
        let per = 17 + basis * 3;
        let body = &bytes[28..];
        if body.len() != n * per * 4 {
            return Err(bad("payload length does not match header"));
        }
        let mut f = SensitivityField::zeros(n, basis);
        f.views = views;
        f.total_pixels = total_pixels;
        let vals: Vec<f64> =
            body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        for (i, row) in vals.chunks_exact(per).enumerate() {
            f.positions[i].copy_from_slice(&row[0..3]);
            f.rotations[i].copy_from_slice(&row[3..7]);
            f.log_scales[i].copy_from_slice(&row[7..10]);
            f.opacity_logits[i] = row[10];
            f.sh[i * basis * 3..(i + 1) * basis * 3].copy_from_slice(&row[11..11 + basis * 3]);
            f.covariances[i].copy_from_slice(&row[11 + basis * 3..]);
        }
        Ok(f)
    }
}

/// Max over consecutive groups of `group` values.
pub fn group_max(values: &[f64], group: usize) -> Vec<f64> {
    values.chunks(group).map(|c| c.iter().copied().fold(0.0, f64::max)).collect()
}

/// Max over arbitrary index groups of a flat sensitivity array.
pub fn vector_sensitivity(values: &[f64], groups: &[Vec<usize>]) -> Vec<f64> {
    groups.iter().map(|g| g.iter().map(|&i| values[i]).fold(0.0, f64::max)).collect()
}

/// Sensitivities over all `cameras`. Each view is rendered without color
/// clamping and back-propagated with an all-ones upstream gradient; absolute
/// gradients are summed over views in camera order.
pub fn parameter_sensitivity(scene: &GaussianScene, cameras: &[Camera]) -> Result<SensitivityField, SensitivityError> {
    if cameras.is_empty() {
        return Err(SensitivityError::NoCameras);
    }
    let per_view: Vec<SceneGradients> = cameras
        .par_iter()
        .map(|cam| {
            let ones = Image::filled(cam.width, cam.height, [1.0; 3]);
            render_backward(scene, cam, &ones, false).expect("upstream sized from camera")
        })
        .collect();
    let mut field = SensitivityField::zeros(scene.len(), scene.sh_basis);
    for g in &per_view {
        field.add_abs(g);
    }
    field.views = cameras.len();
    field.total_pixels = cameras.iter().map(|c| c.pixel_count() as u64).sum();
    field.scale_all(1.0 / field.total_pixels as f64);
    Ok(field)
}

/// Result of removing Gaussians with zero color sensitivity.
#[derive(Debug, Clone)]
pub struct Pruned {
    pub scene: GaussianScene,
    pub field: SensitivityField,
    /// Original indices of the surviving Gaussians.
    pub kept: Vec<usize>,
    pub removed_count: usize,
}

/// Drops every Gaussian whose color-vector sensitivity is exactly zero.
pub fn prune_zero_sensitivity(scene: &GaussianScene, field: &SensitivityField) -> Pruned {
    let color = field.color_sensitivity();
    let kept: Vec<usize> = (0..scene.len()).filter(|&i| color[i] > 0.0).collect();
    Pruned {
        scene: scene.select(&kept),
        field: field.select(&kept),
        removed_count: scene.len() - kept.len(),
        kept,
    }
}

/// Splits `indices` into `(clusterable, retained)` where retained vectors
/// have sensitivity strictly above `beta`. Order is preserved in both parts.
pub fn split_by_threshold(indices: &[usize], sensitivity: &[f64], beta: f64) -> (Vec<usize>, Vec<usize>) {
    indices.iter().partition(|&&i| sensitivity[i] <= beta)
}
