//! Covariance algebra: construction from rotation/scale, trace normalization,
//! and eigendecomposition back into a rotation and scale.

use nalgebra::{Matrix3, SymmetricEigen, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::SceneError;

/// Floor applied to eigenvalues before taking square roots.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Symmetric 3×3 matrix stored by its six unique entries
/// `[xx, xy, xz, yy, yz, zz]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Covariance3(pub [f64; 6]);

impl Covariance3 {
    pub const IDENTITY: Covariance3 = Covariance3([1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);

    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        // symmetrize so round-off in M Mᵀ products never leaks asymmetry
        Covariance3([
            m[(0, 0)],
            0.5 * (m[(0, 1)] + m[(1, 0)]),
            0.5 * (m[(0, 2)] + m[(2, 0)]),
            m[(1, 1)],
            0.5 * (m[(1, 2)] + m[(2, 1)]),
            m[(2, 2)],
        ])
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let [xx, xy, xz, yy, yz, zz] = self.0;
        Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[3] + self.0[5]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Covariance3(self.0.map(|v| v * k))
    }

    /// Frobenius norm of the full 3×3 matrix (off-diagonals counted twice).
    pub fn frobenius(&self) -> f64 {
        let [xx, xy, xz, yy, yz, zz] = self.0;
        (xx * xx + yy * yy + zz * zz + 2.0 * (xy * xy + xz * xz + yz * yz)).sqrt()
    }

    pub fn frobenius_distance(&self, other: &Self) -> f64 {
        let d: [f64; 6] = std::array::from_fn(|i| self.0[i] - other.0[i]);
        Covariance3(d).frobenius()
    }

    pub fn eigenvalues(&self) -> Vector3<f64> {
        SymmetricEigen::new(self.to_matrix()).eigenvalues
    }
}

/// Rotation matrix of a scalar-first quaternion `[w, x, y, z]`. The input is
/// normalized first; a zero quaternion yields the identity.
pub fn rotation_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n == 0.0 {
        return Matrix3::identity();
    }
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Σ = R S² Rᵀ.
pub fn covariance_from(rotation: &[f64; 4], scale: &[f64; 3]) -> Covariance3 {
    let r = rotation_matrix(rotation);
    let m = r * Matrix3::from_diagonal(&Vector3::from(*scale));
    Covariance3::from_matrix(&(m * m.transpose()))
}

/// Splits Σ into its unit-trace form Σ̂ and the scale factor η = √Tr(Σ).
pub fn normalize_covariance(cov: &Covariance3) -> Result<(Covariance3, f64), SceneError> {
    let tr = cov.trace();
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(SceneError::DegenerateCovariance(tr));
    }
    Ok((cov.scaled(1.0 / tr), tr.sqrt()))
}

/// Decomposes a PSD matrix into a scalar-first unit quaternion and a positive
/// scale vector. Eigenvalues come out sorted descending and the eigenvector
/// basis is a proper rotation (det +1).
pub fn eigendecompose_covariance(cov: &Covariance3) -> ([f64; 4], [f64; 3]) {
    let eig = SymmetricEigen::new(cov.to_matrix());
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut basis = Matrix3::zeros();
    let mut scale = [0.0; 3];
    for (dst, &src) in order.iter().enumerate() {
        basis.set_column(dst, &eig.eigenvectors.column(src));
        scale[dst] = eig.eigenvalues[src].max(EIGEN_FLOOR).sqrt();
    }
    if basis.determinant() < 0.0 {
        let flipped = -basis.column(2);
        basis.set_column(2, &flipped);
    }
    let rot = nalgebra::Rotation3::from_matrix_unchecked(basis);
    let q = UnitQuaternion::from_rotation_matrix(&rot);
    let mut out = [q.w, q.i, q.j, q.k];
    // canonical hemisphere
    if out[0] < 0.0 {
        out = out.map(|v| -v);
    }
    (out, scale)
}
