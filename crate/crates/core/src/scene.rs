//! Explicit scene representation: Gaussians, cameras, covariance composition,
//! perspective projection and per-band SH radiance.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::hypercube::{check_wavelengths, SpectralVector};
use crate::sh::{sh_basis, SH_COEFFS};

pub const GSC_MAGIC: [u8; 4] = *b"GSC1";
pub const NEAR_PLANE: f64 = 0.01;
/// Low-pass floor added to the projected covariance diagonal, in px^2.
pub const COV2D_FLOOR: f64 = 0.3;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: Vector3<f64>,
    /// Quaternion `[w, x, y, z]`.
    pub rotation: [f64; 4],
    pub log_scale: Vector3<f64>,
    pub opacity_logit: f64,
    /// `bands x 16`, band-major.
    pub sh: Vec<f64>,
}

impl Gaussian {
    pub fn isotropic(mean: Vector3<f64>, scale: f64, opacity: f64, sh: Vec<f64>) -> Self {
        Self {
            mean,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vector3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            sh,
        }
    }

    pub fn bands(&self) -> usize {
        self.sh.len() / SH_COEFFS
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn scale(&self) -> Vector3<f64> {
        self.log_scale.map(f64::exp)
    }

    pub fn normalize_rotation(&mut self) {
        let n = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 0.0 {
            self.rotation.iter_mut().for_each(|v| *v /= n);
        } else {
            self.rotation = [1.0, 0.0, 0.0, 0.0];
        }
    }

    /// Parameter count for a Gaussian with `bands` SH rows.
    pub fn param_count(bands: usize) -> usize {
        3 + 4 + 3 + 1 + SH_COEFFS * bands
    }
}

/// Rotation matrix of the normalized quaternion `[w, x, y, z]`.
pub fn quat_to_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
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

/// Adjoint of [`quat_to_matrix`], including the normalization.
pub fn quat_to_matrix_backward(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)] + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    let dq_hat = [dw, dx, dy, dz];
    let q_hat = [w, x, y, z];
    let dot: f64 = dq_hat.iter().zip(&q_hat).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for i in 0..4 {
        out[i] = (dq_hat[i] - q_hat[i] * dot) / n;
    }
    out
}

/// `Σ = R S S^T R^T`.
pub fn covariance3d(g: &Gaussian) -> Matrix3<f64> {
    let m = quat_to_matrix(&g.rotation) * Matrix3::from_diagonal(&g.scale());
    m * m.transpose()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraView {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation; camera looks down +z with +y pointing down.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraView {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "focal lengths must be positive, got ({}, {})",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("camera image size must be non-zero".into()));
        }
        let err = (self.rotation * self.rotation.transpose() - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "camera rotation not orthonormal (error {err:.2e})"
            )));
        }
        Ok(())
    }

    /// Pinhole camera at `eye` looking at `target`; `up` is the world up hint.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-9 {
            return Err(Error::InvalidArgument("look_at: up is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Jacobian of `(fx x/z + cx, fy y/z + cy)` at a camera-space point.
    pub fn projection_jacobian(&self, p: &Vector3<f64>) -> Matrix2x3<f64> {
        let (x, y, z) = (p.x, p.y, p.z);
        Matrix2x3::new(
            self.fx / z,
            0.0,
            -self.fx * x / (z * z),
            0.0,
            self.fy / z,
            -self.fy * y / (z * z),
        )
    }

    pub fn project_point(&self, p: &Vector3<f64>) -> Vector2<f64> {
        Vector2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    /// Row-major `[R | t]`.
    pub fn world_to_camera_rows(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    pub fn from_world_to_camera_rows(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rows: &[f64; 12],
    ) -> Result<Self> {
        let rotation = Matrix3::new(
            rows[0], rows[1], rows[2], rows[4], rows[5], rows[6], rows[8], rows[9], rows[10],
        );
        let translation = Vector3::new(rows[3], rows[7], rows[11]);
        Self::new(fx, fy, cx, cy, width, height, rotation, translation)
    }
}

/// `J W Σ W^T J^T` plus the low-pass floor, or `None` when the point is
/// behind the near plane.
pub fn project_covariance(sigma: &Matrix3<f64>, mean_cam: &Vector3<f64>, cam: &CameraView) -> Option<Matrix2<f64>> {
    if mean_cam.z <= NEAR_PLANE {
        return None;
    }
    let j = cam.projection_jacobian(mean_cam);
    let sigma_cam = cam.rotation * sigma * cam.rotation.transpose();
    Some(j * sigma_cam * j.transpose() + Matrix2::identity() * COV2D_FLOOR)
}

/// Per-band radiance `max(0, Σ (SH + offset) Y(v) + 0.5)`.
pub fn radiance(g: &Gaussian, direction: Vector3<f64>, offsets: Option<&[f64]>) -> Result<SpectralVector> {
    if let Some(off) = offsets {
        if off.len() != g.sh.len() {
            return Err(Error::Shape(format!(
                "offsets have {} entries, Gaussian SH has {}",
                off.len(),
                g.sh.len()
            )));
        }
    }
    let basis = sh_basis(direction);
    let mut out = vec![0.0; g.bands()];
    radiance_into(&g.sh, offsets, &basis, &mut out);
    Ok(SpectralVector(out))
}

/// Raw (pre-clamp) per-band sums; shared with the rasterizer.
#[inline]
pub(crate) fn radiance_into(sh: &[f64], offsets: Option<&[f64]>, basis: &[f64; SH_COEFFS], out: &mut [f64]) {
    for (b, o) in out.iter_mut().enumerate() {
        let row = &sh[b * SH_COEFFS..(b + 1) * SH_COEFFS];
        let mut acc = 0.0;
        match offsets {
            Some(off) => {
                let orow = &off[b * SH_COEFFS..(b + 1) * SH_COEFFS];
                for k in 0..SH_COEFFS {
                    acc += (row[k] + orow[k]) * basis[k];
                }
            }
            None => {
                for k in 0..SH_COEFFS {
                    acc += row[k] * basis[k];
                }
            }
        }
        *o = (acc + 0.5).max(0.0);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    wavelengths: Vec<f64>,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>, wavelengths: Vec<f64>) -> Result<Self> {
        check_wavelengths(&wavelengths)?;
        let n = wavelengths.len();
        if n == 0 {
            return Err(Error::Shape("cloud needs at least one band".into()));
        }
        for (i, g) in gaussians.iter().enumerate() {
            if g.sh.len() != n * SH_COEFFS {
                return Err(Error::Shape(format!(
                    "gaussian {i} has {} SH values, expected {}",
                    g.sh.len(),
                    n * SH_COEFFS
                )));
            }
        }
        Ok(Self { gaussians, wavelengths })
    }

    pub fn bands(&self) -> usize {
        self.wavelengths.len()
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    /// `GSC1` block: magic, count, N, N wavelengths, then one record per
    /// Gaussian, all little-endian 32-bit.
    pub fn to_gsc_bytes(&self) -> Vec<u8> {
        let n = self.bands();
        let mut out = Vec::with_capacity(12 + 4 * n + 4 * self.len() * Gaussian::param_count(n));
        out.extend_from_slice(&GSC_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        let mut push = |v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        for &w in &self.wavelengths {
            push(w);
        }
        for g in &self.gaussians {
            for v in flatten_gaussian(g) {
                push(v);
            }
        }
        out
    }

    pub fn from_gsc_bytes(bytes: &[u8]) -> Result<Self> {
        let (cloud, used) = Self::parse_gsc(bytes, |b| f32::from_le_bytes(b.try_into().unwrap()) as f64, 4)?;
        if used != bytes.len() {
            return Err(Error::TrailingBytes {
                expected: used,
                found: bytes.len(),
            });
        }
        Ok(cloud)
    }

    /// Full-precision variant of the `GSC1` layout (same field order, 64-bit
    /// floats), used where bit-exact state is required.
    pub fn to_exact_bytes(&self) -> Vec<u8> {
        let n = self.bands();
        let mut out = Vec::new();
        out.extend_from_slice(&GSC_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for &w in &self.wavelengths {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for g in &self.gaussians {
            for v in flatten_gaussian(g) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_exact_bytes(bytes: &[u8]) -> Result<Self> {
        let (cloud, used) = Self::parse_gsc(bytes, |b| f64::from_le_bytes(b.try_into().unwrap()), 8)?;
        if used != bytes.len() {
            return Err(Error::TrailingBytes {
                expected: used,
                found: bytes.len(),
            });
        }
        Ok(cloud)
    }

    fn parse_gsc(bytes: &[u8], read: impl Fn(&[u8]) -> f64, width: usize) -> Result<(Self, usize)> {
        if bytes.len() < 12 {
            return Err(Error::Truncated {
                expected: 12,
                found: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != GSC_MAGIC {
            return Err(Error::BadMagic {
                expected: GSC_MAGIC,
                found: magic,
            });
        }
        let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let per = Gaussian::param_count(n);
        let expected = 12 + width * (n + count * per);
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        let values: Vec<f64> = bytes[12..expected].chunks_exact(width).map(&read).collect();
        let (wl, rest) = values.split_at(n);
        if let Some(i) = rest.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index: i });
        }
        let gaussians = rest.chunks_exact(per).map(unflatten_gaussian).collect();
        Ok((Self::new(gaussians, wl.to_vec())?, expected))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_gsc_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_gsc_bytes(&bytes)
    }
}

pub(crate) fn flatten_gaussian(g: &Gaussian) -> impl Iterator<Item = f64> + '_ {
    g.mean
        .iter()
        .copied()
        .chain(g.rotation.iter().copied())
        .chain(g.log_scale.iter().copied())
        .chain(std::iter::once(g.opacity_logit))
        .chain(g.sh.iter().copied())
}

pub(crate) fn unflatten_gaussian(v: &[f64]) -> Gaussian {
    Gaussian {
        mean: Vector3::new(v[0], v[1], v[2]),
        rotation: [v[3], v[4], v[5], v[6]],
        log_scale: Vector3::new(v[7], v[8], v[9]),
        opacity_logit: v[10],
        sh: v[11..].to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sh::SH_C0;
    use proptest::prelude::*;

    fn gaussian(rotation: [f64; 4], scales: [f64; 3], bands: usize) -> Gaussian {
        Gaussian {
            mean: Vector3::zeros(),
            rotation,
            log_scale: Vector3::new(scales[0].ln(), scales[1].ln(), scales[2].ln()),
            opacity_logit: 0.0,
            sh: vec![0.0; bands * SH_COEFFS],
        }
    }

    #[test]
    fn identity_rotation_gives_diagonal_covariance() {
        let s = covariance3d(&gaussian([1.0, 0.0, 0.0, 0.0], [2.0, 3.0, 0.5], 1));
        let expected = Matrix3::from_diagonal(&Vector3::new(4.0, 9.0, 0.25));
        assert!((s - expected).abs().max() < 1e-12);
    }

    #[test]
    fn quarter_turn_about_z_swaps_axes() {
        let h = std::f64::consts::FRAC_PI_4;
        let s = covariance3d(&gaussian([h.cos(), 0.0, 0.0, h.sin()], [2.0, 1.0, 1.0], 1));
        let expected = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0));
        assert!((s - expected).abs().max() < 1e-12, "{s}");
    }

    #[test]
    fn unit_projection_example() {
        let cam = CameraView::new(1.0, 1.0, 0.0, 0.0, 4, 4, Matrix3::identity(), Vector3::zeros()).unwrap();
        let p = Vector3::new(0.0, 0.0, 1.0);
        let j = cam.projection_jacobian(&p);
        assert_eq!(j, Matrix2x3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0));
        let s = project_covariance(&Matrix3::identity(), &p, &cam).unwrap();
        assert!((s - Matrix2::identity() * 1.3).abs().max() < 1e-15);
    }

    #[test]
    fn doubling_fx_quadruples_first_entry() {
        let sigma = Matrix3::new(1.0, 0.2, 0.1, 0.2, 2.0, 0.3, 0.1, 0.3, 1.5);
        let p = Vector3::new(0.3, -0.2, 2.0);
        let a = CameraView::new(50.0, 40.0, 0.0, 0.0, 4, 4, Matrix3::identity(), Vector3::zeros()).unwrap();
        let mut b = a.clone();
        b.fx = 100.0;
        let (ja, jb) = (a.projection_jacobian(&p), b.projection_jacobian(&p));
        for c in 0..3 {
            assert!((jb[(0, c)] - 2.0 * ja[(0, c)]).abs() < 1e-12);
            assert_eq!(jb[(1, c)], ja[(1, c)]);
        }
        let sa = project_covariance(&sigma, &p, &a).unwrap()[(0, 0)] - COV2D_FLOOR;
        let sb = project_covariance(&sigma, &p, &b).unwrap()[(0, 0)] - COV2D_FLOOR;
        assert!((sb - 4.0 * sa).abs() < 1e-9);
    }

    #[test]
    fn near_plane_culls() {
        let cam = CameraView::new(1.0, 1.0, 0.0, 0.0, 4, 4, Matrix3::identity(), Vector3::zeros()).unwrap();
        assert!(project_covariance(&Matrix3::identity(), &Vector3::new(0.0, 0.0, 0.01), &cam).is_none());
        assert!(project_covariance(&Matrix3::identity(), &Vector3::new(0.0, 0.0, -1.0), &cam).is_none());
    }

    #[test]
    fn radiance_dc_only_and_cancellation() {
        let mut g = gaussian([1.0, 0.0, 0.0, 0.0], [1.0; 3], 3);
        for b in 0..3 {
            g.sh[b * SH_COEFFS] = 0.4 * (b as f64 + 1.0);
        }
        let r = radiance(&g, Vector3::new(0.2, 0.3, 0.9), None).unwrap();
        for b in 0..3 {
            assert!((r[b] - (0.4 * (b as f64 + 1.0) * SH_C0 + 0.5)).abs() < 1e-14);
        }
        g.sh.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 * 0.37).sin());
        let neg: Vec<f64> = g.sh.iter().map(|v| -v).collect();
        let r = radiance(&g, Vector3::new(-0.5, 0.1, 0.3), Some(&neg)).unwrap();
        assert!(r.iter().all(|&v| v == 0.5));
        assert!(radiance(&g, Vector3::x(), Some(&neg[1..])).is_err());
    }

    #[test]
    fn negative_radiance_clamps_to_zero() {
        let mut g = gaussian([1.0, 0.0, 0.0, 0.0], [1.0; 3], 1);
        g.sh[0] = -10.0;
        assert_eq!(radiance(&g, Vector3::z(), None).unwrap()[0], 0.0);
    }

    #[test]
    fn equal_bands_render_equal() {
        let mut g = gaussian([1.0, 0.0, 0.0, 0.0], [1.0; 3], 3);
        for b in 0..3 {
            for k in 0..SH_COEFFS {
                g.sh[b * SH_COEFFS + k] = 0.1 * k as f64 - 0.3;
            }
        }
        for dir in [Vector3::x(), Vector3::new(0.3, -0.7, 0.2)] {
            let r = radiance(&g, dir, None).unwrap();
            assert_eq!(r[0], r[1]);
            assert_eq!(r[1], r[2]);
        }
    }

    #[test]
    fn look_at_centers_target() {
        let cam = CameraView::look_at(
            Vector3::new(0.0, -4.0, 1.0),
            Vector3::zeros(),
            Vector3::z(),
            60.0,
            32,
            32,
        )
        .unwrap();
        let p = cam.to_camera(&Vector3::zeros());
        assert!(p.z > 0.0);
        let px = cam.project_point(&p);
        assert!((px - Vector2::new(16.0, 16.0)).norm() < 1e-9);
        assert!((cam.center() - Vector3::new(0.0, -4.0, 1.0)).norm() < 1e-12);
        // world up projects upward on screen
        let above = cam.project_point(&cam.to_camera(&Vector3::new(0.0, 0.0, 0.5)));
        assert!(above.y < 16.0);
    }

    #[test]
    fn gsc_round_trip() {
        let mut g = gaussian([0.5, 0.5, 0.5, 0.5], [0.5, 0.25, 2.0], 2);
        g.mean = Vector3::new(1.0, -2.0, 0.5);
        g.sh[3] = 0.125;
        let cloud = GaussianCloud::new(vec![g.clone(), g], vec![450.0, 650.0]).unwrap();
        let back = GaussianCloud::from_gsc_bytes(&cloud.to_gsc_bytes()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.wavelengths(), cloud.wavelengths());
        assert_eq!(back.gaussians[0].mean, cloud.gaussians[0].mean);
        assert_eq!(cloud.to_gsc_bytes().len(), 12 + 4 * 2 + 2 * 4 * (11 + 32));
        let exact = GaussianCloud::from_exact_bytes(&cloud.to_exact_bytes()).unwrap();
        assert_eq!(exact, cloud);
        let mut bad = cloud.to_gsc_bytes();
        bad[0] = b'X';
        assert!(matches!(GaussianCloud::from_gsc_bytes(&bad), Err(Error::BadMagic { .. })));
    }

    fn arb_quat() -> impl Strategy<Value = [f64; 4]> {
        prop::array::uniform4(-1.0f64..1.0).prop_filter("non-degenerate", |q| q.iter().map(|v| v * v).sum::<f64>() > 0.01)
    }

    proptest! {
        #[test]
        fn covariance_is_symmetric_psd(q in arb_quat(), s in prop::array::uniform3(-3.0f64..1.0)) {
            let g = Gaussian {
                mean: Vector3::zeros(),
                rotation: q,
                log_scale: Vector3::new(s[0], s[1], s[2]),
                opacity_logit: 0.0,
                sh: vec![0.0; SH_COEFFS],
            };
            let sigma = covariance3d(&g);
            prop_assert!((sigma - sigma.transpose()).abs().max() < 1e-12);
            let eig = sigma.symmetric_eigen().eigenvalues;
            prop_assert!(eig.min() >= -1e-12 * sigma.abs().max().max(1.0));
        }

        #[test]
        fn projection_ignores_quaternion_sign(q in arb_quat(), s in prop::array::uniform3(-2.0f64..0.5),
                                              m in prop::array::uniform3(-1.0f64..1.0)) {
            let cam = CameraView::look_at(Vector3::new(0.0, -5.0, 0.5), Vector3::zeros(), Vector3::z(), 40.0, 16, 16).unwrap();
            let mut g = Gaussian {
                mean: Vector3::new(m[0], m[1], m[2]),
                rotation: q,
                log_scale: Vector3::new(s[0], s[1], s[2]),
                opacity_logit: 0.0,
                sh: vec![0.0; SH_COEFFS],
            };
            let mc = cam.to_camera(&g.mean);
            let a = project_covariance(&covariance3d(&g), &mc, &cam).unwrap();
            g.rotation = [-q[0], -q[1], -q[2], -q[3]];
            let b = project_covariance(&covariance3d(&g), &mc, &cam).unwrap();
            prop_assert!((a - b).abs().max() <= 1e-12 * a.abs().max());
        }

        #[test]
        fn radiance_linear_in_sh(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let bands = 3;
            let sh1: Vec<f64> = (0..bands * SH_COEFFS).map(|_| rng.gen_range(-0.01..0.01)).collect();
            let sh2: Vec<f64> = (0..bands * SH_COEFFS).map(|_| rng.gen_range(-0.01..0.01)).collect();
            let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let mk = |sh: Vec<f64>| Gaussian { mean: Vector3::zeros(), rotation: [1.0, 0.0, 0.0, 0.0],
                log_scale: Vector3::zeros(), opacity_logit: 0.0, sh };
            let mix: Vec<f64> = sh1.iter().zip(&sh2).map(|(x, y)| a * x + b * y).collect();
            // remove the +0.5 shift to test the linear part; no clamping at these magnitudes
            let r1 = radiance(&mk(sh1), dir, None).unwrap();
            let r2 = radiance(&mk(sh2), dir, None).unwrap();
            let rm = radiance(&mk(mix), dir, None).unwrap();
            for k in 0..bands {
                let lin = a * (r1[k] - 0.5) + b * (r2[k] - 0.5);
                prop_assert!((rm[k] - 0.5 - lin).abs() < 1e-12);
            }
        }
    }
}
