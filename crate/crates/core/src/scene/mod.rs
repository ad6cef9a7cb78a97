//! Scene and camera data model.

mod camera;
pub mod covariance;
mod image;
pub mod ply;
pub mod sh;
pub mod synth;

pub use camera::{load_cameras, save_cameras, Camera, CameraFile};
pub use covariance::{
    covariance_from, eigendecompose_covariance, normalize_covariance, rotation_matrix, Covariance3,
};
pub use image::Image;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("degenerate covariance: trace {0} is not positive")]
    DegenerateCovariance(f64),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("gaussian {index}: quaternion has zero norm")]
    ZeroQuaternion { index: usize },
    #[error("unsupported SH coefficient count {0} (expected 1, 4, 9 or 16 per channel)")]
    ShBasis(usize),
    #[error("image: {0}")]
    Image(String),
    #[error("camera file: {0}")]
    CameraFile(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`sigmoid`].
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Optimized Gaussian scene in storage (pre-activation) form.
///
/// Scales are stored as logarithms, opacities as logits and rotations as
/// scalar-first quaternions. SH coefficients are `sh_basis × 3` per Gaussian,
/// basis-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianScene {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub sh: Vec<f64>,
    pub sh_basis: usize,
}

impl GaussianScene {
    pub fn empty(sh_basis: usize) -> Self {
        GaussianScene {
            positions: Vec::new(),
            rotations: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            sh: Vec::new(),
            sh_basis,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Scalars per Gaussian in the SH block.
    pub fn sh_dim(&self) -> usize {
        self.sh_basis * 3
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let d = self.sh_dim();
        &self.sh[i * d..(i + 1) * d]
    }

    pub fn scale(&self, i: usize) -> [f64; 3] {
        self.log_scales[i].map(f64::exp)
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn covariance(&self, i: usize) -> Covariance3 {
        covariance_from(&self.rotations[i], &self.scale(i))
    }

    /// Appends one Gaussian.
    pub fn push(&mut self, position: [f64; 3], rotation: [f64; 4], log_scale: [f64; 3], opacity_logit: f64, sh: &[f64]) {
        assert_eq!(sh.len(), self.sh_dim(), "SH block size mismatch");
        self.positions.push(position);
        self.rotations.push(rotation);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.sh.extend_from_slice(sh);
    }

    /// New scene made of the listed Gaussians, in the listed order.
    pub fn select(&self, indices: &[usize]) -> GaussianScene {
        let mut out = GaussianScene::empty(self.sh_basis);
        for &i in indices {
            out.push(
                self.positions[i],
                self.rotations[i],
                self.log_scales[i],
                self.opacity_logits[i],
                self.sh_of(i),
            );
        }
        out
    }

    /// Renormalizes every quaternion whose norm deviates from 1 by more than
    /// 1e-6. Quaternions already within tolerance are left bit-identical.
    pub fn normalize_rotations(&mut self) -> Result<(), SceneError> {
        for (index, q) in self.rotations.iter_mut().enumerate() {
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(SceneError::ZeroQuaternion { index });
            }
            if (n - 1.0).abs() > 1e-6 {
                *q = q.map(|v| v / n);
            }
        }
        Ok(())
    }

    /// Post-activation parameters as consumed by the renderer.
    pub fn activated(&self) -> ActivatedScene {
        ActivatedScene {
            positions: self.positions.clone(),
            rotations: self.rotations.clone(),
            scales: self.log_scales.iter().map(|s| s.map(f64::exp)).collect(),
            opacities: self.opacity_logits.iter().map(|&l| sigmoid(l)).collect(),
            sh: self.sh.clone(),
            sh_basis: self.sh_basis,
        }
    }
}

/// Post-activation Gaussian parameters: linear scales and opacities in
/// `[0, 1]`. Quaternions may be unnormalized; the renderer normalizes them.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedScene {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub scales: Vec<[f64; 3]>,
    pub opacities: Vec<f64>,
    pub sh: Vec<f64>,
    pub sh_basis: usize,
}

impl ActivatedScene {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_dim(&self) -> usize {
        self.sh_basis * 3
    }

    pub fn sh_of(&self, i: usize) -> &[f64] {
        let d = self.sh_dim();
        &self.sh[i * d..(i + 1) * d]
    }

    /// Back to storage form. Zero scales map to `-inf` log-scales and
    /// opacities of exactly 0 or 1 to infinite logits.
    pub fn to_scene(&self) -> GaussianScene {
        GaussianScene {
            positions: self.positions.clone(),
            rotations: self.rotations.clone(),
            log_scales: self.scales.iter().map(|s| s.map(f64::ln)).collect(),
            opacity_logits: self.opacities.iter().map(|&a| logit(a)).collect(),
            sh: self.sh.clone(),
            sh_basis: self.sh_basis,
        }
    }

    /// Applies a permutation: output Gaussian `k` is input `order[k]`.
    pub fn permuted(&self, order: &[usize]) -> ActivatedScene {
        let d = self.sh_dim();
        let mut sh = Vec::with_capacity(self.sh.len());
        for &i in order {
            sh.extend_from_slice(&self.sh[i * d..(i + 1) * d]);
        }
        ActivatedScene {
            positions: order.iter().map(|&i| self.positions[i]).collect(),
            rotations: order.iter().map(|&i| self.rotations[i]).collect(),
            scales: order.iter().map(|&i| self.scales[i]).collect(),
            opacities: order.iter().map(|&i| self.opacities[i]).collect(),
            sh,
            sh_basis: self.sh_basis,
        }
    }
}
