//! Real spherical harmonics up to degree 3, using the sign convention of the
//! reference 3DGS rasterizer. Index of `(l, m)` is `l*l + l + m`.

use nalgebra::Vector3;

pub const SH_DEGREE: usize = 3;
pub const SH_COEFFS: usize = (SH_DEGREE + 1) * (SH_DEGREE + 1);

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

/// Evaluates the 16 basis functions. Non-unit input is normalized first.
pub fn sh_basis(direction: Vector3<f64>) -> [f64; SH_COEFFS] {
    let n = direction.norm();
    let d = if n > 0.0 { direction / n } else { Vector3::z() };
    basis_unit(d.x, d.y, d.z)
}

fn basis_unit(x: f64, y: f64, z: f64) -> [f64; SH_COEFFS] {
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        SH_C0,
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * x * y,
        SH_C2[1] * y * z,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * x * z,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3.0 * xx - yy),
        SH_C3[1] * x * y * z,
        SH_C3[2] * y * (4.0 * zz - xx - yy),
        SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
        SH_C3[4] * x * (4.0 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3.0 * yy),
    ]
}

/// Partial derivatives of each basis polynomial with respect to the
/// components of a unit direction (before projection onto the tangent plane).
fn basis_partials(x: f64, y: f64, z: f64) -> [[f64; 3]; SH_COEFFS] {
    let (xx, yy, zz) = (x * x, y * y, z * z);
    [
        [0.0, 0.0, 0.0],
        [0.0, -SH_C1, 0.0],
        [0.0, 0.0, SH_C1],
        [-SH_C1, 0.0, 0.0],
        [SH_C2[0] * y, SH_C2[0] * x, 0.0],
        [0.0, SH_C2[1] * z, SH_C2[1] * y],
        [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z],
        [SH_C2[3] * z, 0.0, SH_C2[3] * x],
        [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0],
        [
            SH_C3[0] * 6.0 * x * y,
            SH_C3[0] * (3.0 * xx - 3.0 * yy),
            0.0,
        ],
        [SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y],
        [
            -2.0 * SH_C3[2] * x * y,
            SH_C3[2] * (4.0 * zz - xx - 3.0 * yy),
            8.0 * SH_C3[2] * y * z,
        ],
        [
            -6.0 * SH_C3[3] * x * z,
            -6.0 * SH_C3[3] * y * z,
            SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
        ],
        [
            SH_C3[4] * (4.0 * zz - 3.0 * xx - yy),
            -2.0 * SH_C3[4] * x * y,
            8.0 * SH_C3[4] * x * z,
        ],
        [2.0 * SH_C3[5] * x * z, -2.0 * SH_C3[5] * y * z, SH_C3[5] * (xx - yy)],
        [
            SH_C3[6] * (3.0 * xx - 3.0 * yy),
            -6.0 * SH_C3[6] * x * y,
            0.0,
        ],
    ]
}

/// Back-propagates `d_basis` (gradient w.r.t. each basis value) to the
/// unnormalized direction vector that was passed to [`sh_basis`].
pub fn sh_basis_backward(direction: Vector3<f64>, d_basis: &[f64; SH_COEFFS]) -> Vector3<f64> {
    let n = direction.norm();
    if n == 0.0 {
        return Vector3::zeros();
    }
    let d = direction / n;
    let partials = basis_partials(d.x, d.y, d.z);
    let mut g = Vector3::zeros();
    for (k, p) in partials.iter().enumerate() {
        g += Vector3::new(p[0], p[1], p[2]) * d_basis[k];
    }
    // d(u/|u|)/du = (I - d d^T) / |u|
    (g - d * d.dot(&g)) / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn dc_constant_everywhere() {
        for dir in [Vector3::x(), Vector3::new(0.3, -0.2, 0.9), -Vector3::z()] {
            assert!((sh_basis(dir)[0] - 0.282_094_8).abs() < 1e-7);
        }
        assert!((SH_C0 - 0.5 / std::f64::consts::PI.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn pole_kills_nonzero_orders() {
        let b = sh_basis(Vector3::z());
        for l in 0..=3i64 {
            for m in -l..=l {
                let idx = (l * l + l + m) as usize;
                if m != 0 {
                    assert_eq!(b[idx], 0.0, "index {idx}");
                } else {
                    assert!(b[idx].abs() > 0.1, "index {idx}");
                }
            }
        }
    }

    #[test]
    fn normalizes_non_unit_input() {
        let a = sh_basis(Vector3::new(1.0, 2.0, -0.5));
        let b = sh_basis(Vector3::new(1.0, 2.0, -0.5) * 7.0);
        for k in 0..SH_COEFFS {
            assert!((a[k] - b[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let u = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let mut w = [0.0; SH_COEFFS];
            w.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
            let f = |v: Vector3<f64>| sh_basis(v).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let g = sh_basis_backward(u, &w);
            let h = 1e-6;
            for i in 0..3 {
                let mut up = u;
                up[i] += h;
                let mut dn = u;
                dn[i] -= h;
                let fd = (f(up) - f(dn)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
            }
        }
    }
}
