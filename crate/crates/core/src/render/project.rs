use nalgebra::{Matrix2, Matrix2x3, Vector2, Vector3};

use crate::scene::{Camera, Covariance3};

/// Screen-space footprint of a 3D Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub center: [f64; 2],
    /// `[a, b, c]` of `[[a, b], [b, c]]`, dilation included.
    pub cov2d: [f64; 3],
    pub depth: f64,
}

/// Jacobian of the perspective projection at camera-space point `t`.
pub(crate) fn perspective_jacobian(t: &Vector3<f64>, fx: f64, fy: f64) -> Matrix2x3<f64> {
    let iz = 1.0 / t.z;
    let iz2 = iz * iz;
    Matrix2x3::new(fx * iz, 0.0, -fx * t.x * iz2, 0.0, fy * iz, -fy * t.y * iz2)
}

/// Projects Σ at world position `x`: Σ′ = J W Σ Wᵀ Jᵀ + dilation·I. Returns
/// `None` when the point is not in front of the near plane.
pub fn project(cov: &Covariance3, x: [f64; 3], cam: &Camera, dilation: f64, near: f64) -> Option<Projection> {
    let t = cam.to_camera(&Vector3::from(x));
    if t.z <= near {
        return None;
    }
    let tw = perspective_jacobian(&t, cam.fx, cam.fy) * cam.rotation();
    let s = tw * cov.to_matrix() * tw.transpose();
    Some(Projection {
        center: [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy],
        cov2d: [s[(0, 0)] + dilation, 0.5 * (s[(0, 1)] + s[(1, 0)]), s[(1, 1)] + dilation],
        depth: t.z,
    })
}

/// Whether the ellipse `{p : (p−c)ᵀ Q (p−c) ≤ r²}` meets `[0,w]×[0,h]`.
pub fn ellipse_intersects_rect(center: [f64; 2], conic: &Matrix2<f64>, radius: f64, w: u32, h: u32) -> bool {
    let (w, h) = (w as f64, h as f64);
    let c = Vector2::from(center);
    if (0.0..=w).contains(&c.x) && (0.0..=h).contains(&c.y) {
        return true;
    }
    // center outside: the minimum of the quadratic form over the rectangle
    // lies on its boundary
    let r2 = radius * radius;
    let corners = [Vector2::new(0.0, 0.0), Vector2::new(w, 0.0), Vector2::new(w, h), Vector2::new(0.0, h)];
    (0..4).any(|k| {
        let p0 = corners[k];
        let e = corners[(k + 1) % 4] - p0;
        let a = p0 - c;
        let eqe = (e.transpose() * conic * e)[0];
        let s = if eqe > 0.0 { (-(e.transpose() * conic * a)[0] / eqe).clamp(0.0, 1.0) } else { 0.0 };
        let d = a + e * s;
        (d.transpose() * conic * d)[0] <= r2
    })
}
