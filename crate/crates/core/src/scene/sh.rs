//! Real spherical-harmonics color evaluation (degree ≤ 3) with the basis
//! derivatives needed by the renderer's backward pass.
//!
//! Coefficients are laid out basis-major: `coeffs[k * 3 + channel]`.

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

/// Number of basis functions for a degree, `(L+1)²`.
pub const fn basis_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Degree for a basis count, if it is one of 1, 4, 9, 16.
pub fn degree_for_basis(count: usize) -> Option<usize> {
    match count {
        1 => Some(0),
        4 => Some(1),
        9 => Some(2),
        16 => Some(3),
        _ => None,
    }
}

/// Basis values `Y_k(dir)` for the first `count` functions.
pub fn basis(dir: [f64; 3], count: usize) -> [f64; 16] {
    let [x, y, z] = dir;
    let mut out = [0.0; 16];
    out[0] = SH_C0;
    if count > 1 {
        out[1] = -SH_C1 * y;
        out[2] = SH_C1 * z;
        out[3] = -SH_C1 * x;
    }
    if count > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        out[4] = SH_C2[0] * x * y;
        out[5] = SH_C2[1] * y * z;
        out[6] = SH_C2[2] * (2.0 * zz - xx - yy);
        out[7] = SH_C2[3] * x * z;
        out[8] = SH_C2[4] * (xx - yy);
        if count > 9 {
            out[9] = SH_C3[0] * y * (3.0 * xx - yy);
            out[10] = SH_C3[1] * x * y * z;
            out[11] = SH_C3[2] * y * (4.0 * zz - xx - yy);
            out[12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
            out[13] = SH_C3[4] * x * (4.0 * zz - xx - yy);
            out[14] = SH_C3[5] * z * (xx - yy);
            out[15] = SH_C3[6] * x * (xx - 3.0 * yy);
        }
    }
    out
}

/// Partial derivatives of each basis polynomial w.r.t. the direction
/// components (x, y, z), evaluated at `dir`.
pub fn basis_gradient(dir: [f64; 3], count: usize) -> [[f64; 3]; 16] {
    let [x, y, z] = dir;
    let mut g = [[0.0; 3]; 16];
    if count > 1 {
        g[1] = [0.0, -SH_C1, 0.0];
        g[2] = [0.0, 0.0, SH_C1];
        g[3] = [-SH_C1, 0.0, 0.0];
    }
    if count > 4 {
        let (xx, yy, zz) = (x * x, y * y, z * z);
        g[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
        g[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
        g[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
        g[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
        g[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
        if count > 9 {
            g[9] = [6.0 * SH_C3[0] * x * y, SH_C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
            g[10] = [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y];
            g[11] = [
                -2.0 * SH_C3[2] * x * y,
                SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
                8.0 * SH_C3[2] * y * z,
            ];
            g[12] = [
                -6.0 * SH_C3[3] * x * z,
                -6.0 * SH_C3[3] * y * z,
                SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            g[13] = [
                SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
                -2.0 * SH_C3[4] * x * y,
                8.0 * SH_C3[4] * x * z,
            ];
            g[14] = [2.0 * SH_C3[5] * x * z, -2.0 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)];
            g[15] = [SH_C3[6] * (3.0 * xx - 3.0 * yy), -6.0 * SH_C3[6] * x * y, 0.0];
        }
    }
    g
}

/// RGB color `0.5 + Σ c_k·Y_k(dir)`, optionally clamped at zero per channel.
pub fn sh_eval(coeffs: &[f64], dir: [f64; 3], clamp: bool) -> [f64; 3] {
    let count = coeffs.len() / 3;
    let y = basis(dir, count);
    let mut rgb = [0.5; 3];
    for k in 0..count {
        for (ch, out) in rgb.iter_mut().enumerate() {
            *out += coeffs[k * 3 + ch] * y[k];
        }
    }
    if clamp {
        rgb = rgb.map(|v| v.max(0.0));
    }
    rgb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_only() {
        let rgb = sh_eval(&[1.0, 1.0, 1.0], [0.0, 0.0, 1.0], true);
        let expect = 0.5 + 1.0 / (2.0 * std::f64::consts::PI.sqrt());
        for v in rgb {
            assert!((v - expect).abs() < 1e-12);
            assert!((v - 0.7821).abs() < 1e-4);
        }
        assert_eq!(sh_eval(&[0.0; 48], [0.6, 0.0, 0.8], true), [0.5; 3]);
    }

    #[test]
    fn clamp_semantics() {
        let c = -0.6 / SH_C0;
        let coeffs = [c, 0.0, 0.0];
        let clamped = sh_eval(&coeffs, [1.0, 0.0, 0.0], true);
        let raw = sh_eval(&coeffs, [1.0, 0.0, 0.0], false);
        assert_eq!(clamped[0], 0.0);
        assert!((raw[0] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dir = [0.3, -0.5, 0.81];
        let g = basis_gradient(dir, 16);
        let h = 1e-6;
        for axis in 0..3 {
            let mut p = dir;
            let mut m = dir;
            p[axis] += h;
            m[axis] -= h;
            let (bp, bm) = (basis(p, 16), basis(m, 16));
            for k in 0..16 {
                let fd = (bp[k] - bm[k]) / (2.0 * h);
                assert!((fd - g[k][axis]).abs() < 1e-8, "k={k} axis={axis}");
            }
        }
    }

    #[test]
    fn basis_is_orthonormal_by_quadrature() {
        // Fibonacci-sphere quadrature of ∫ Y_i Y_j dΩ.
        let n = 20000;
        let mut gram = [[0.0; 16]; 16];
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        for i in 0..n {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let y = basis([r * phi.cos(), r * phi.sin(), z], 16);
            for a in 0..16 {
                for b in 0..16 {
                    gram[a][b] += y[a] * y[b] * 4.0 * std::f64::consts::PI / n as f64;
                }
            }
        }
        for a in 0..16 {
            for b in 0..16 {
                let expect = if a == b { 1.0 } else { 0.0 };
                assert!((gram[a][b] - expect).abs() < 1e-3, "({a},{b}) = {}", gram[a][b]);
            }
        }
    }
}
