//! Depth-sorted alpha blending of projected Gaussians into an N-band image,
//! plus the exact adjoint of every step.
//!
//! The forward pass sorts all visible Gaussians once per view by camera-space
//! depth. The image is split into 16x16 tiles purely for parallelism; each
//! tile receives the globally sorted subset whose screen footprint touches it.
//! The backward pass recomputes per-pixel blending state instead of storing
//! per-pixel per-Gaussian intermediates.

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hypercube::HyperCube;
use crate::scene::{quat_to_matrix, quat_to_matrix_backward, sigmoid, CameraView, GaussianCloud, COV2D_FLOOR, NEAR_PLANE};
use crate::sh::{sh_basis, sh_basis_backward, SH_COEFFS};

pub const TILE: usize = 16;
pub const MAX_ALPHA: f64 = 0.99;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
/// Gaussian falloff exponents below this are treated as exactly zero
/// (exp(-20) ~ 2e-9).
const MIN_POWER: f64 = -20.0;

/// Screen-space footprint of one visible Gaussian.
#[derive(Clone, Debug)]
struct Splat {
    index: usize,
    depth: f64,
    mean2d: Vector2<f64>,
    /// Inverse 2D covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    conic: [f64; 3],
    opacity: f64,
    color: Vec<f64>,
    bbox: [usize; 4],
}

#[derive(Clone, Debug)]
pub struct RenderedView {
    pub cube: HyperCube,
    /// Accumulated `Σ T_i α_i` per pixel.
    pub alpha: Vec<f64>,
    /// Whether each Gaussian survived culling for this view.
    pub visible: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrad {
    pub d_mean: Vector3<f64>,
    pub d_rotation: [f64; 4],
    pub d_log_scale: Vector3<f64>,
    pub d_opacity_logit: f64,
    pub d_sh: Vec<f64>,
}

impl GaussianGrad {
    fn zeros(bands: usize) -> Self {
        Self {
            d_mean: Vector3::zeros(),
            d_rotation: [0.0; 4],
            d_log_scale: Vector3::zeros(),
            d_opacity_logit: 0.0,
            d_sh: vec![0.0; bands * SH_COEFFS],
        }
    }

    /// Same field order as the checkpoint records.
    pub fn flatten(&self) -> Vec<f64> {
        self.d_mean
            .iter()
            .copied()
            .chain(self.d_rotation)
            .chain(self.d_log_scale.iter().copied())
            .chain(std::iter::once(self.d_opacity_logit))
            .chain(self.d_sh.iter().copied())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RenderGradients {
    pub gaussians: Vec<GaussianGrad>,
    /// `N x 16` gradient of the shared per-band SH offsets.
    pub d_offsets: Vec<f64>,
    /// `‖∂L/∂μ_screen‖` per Gaussian, in pixels.
    pub screen_grad: Vec<f64>,
    pub visible: Vec<bool>,
}

/// Everything per-Gaussian the backward pass needs to redo the projection.
struct Geometry {
    mean_cam: Vector3<f64>,
    jac: Matrix2x3<f64>,
    sigma_cam: Matrix3<f64>,
    cov2d: Matrix2<f64>,
    view_dir: Vector3<f64>,
}

fn check_offsets(cloud: &GaussianCloud, offsets: &[f64]) -> Result<()> {
    if offsets.len() != cloud.bands() * SH_COEFFS {
        return Err(Error::Shape(format!(
            "offsets have {} entries, expected {} (bands x 16)",
            offsets.len(),
            cloud.bands() * SH_COEFFS
        )));
    }
    Ok(())
}

fn geometry(cloud: &GaussianCloud, i: usize, cam: &CameraView, cam_center: &Vector3<f64>) -> Option<Geometry> {
    let g = &cloud.gaussians[i];
    let mean_cam = cam.to_camera(&g.mean);
    if mean_cam.z <= NEAR_PLANE {
        return None;
    }
    let rot = quat_to_matrix(&g.rotation);
    let m = rot * Matrix3::from_diagonal(&g.scale());
    let sigma = m * m.transpose();
    let sigma_cam = cam.rotation * sigma * cam.rotation.transpose();
    let jac = cam.projection_jacobian(&mean_cam);
    let cov2d = jac * sigma_cam * jac.transpose() + Matrix2::identity() * COV2D_FLOOR;
    Some(Geometry {
        mean_cam,
        jac,
        sigma_cam,
        cov2d,
        view_dir: g.mean - cam_center,
    })
}

fn project(cloud: &GaussianCloud, cam: &CameraView, offsets: &[f64]) -> Vec<Splat> {
    let center = cam.center();
    let bands = cloud.bands();
    let mut splats: Vec<Splat> = (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| {
            let geo = geometry(cloud, i, cam, &center)?;
            let det = geo.cov2d.determinant();
            if !(det > 0.0) {
                return None;
            }
            let (a, b, c) = (geo.cov2d[(1, 1)] / det, -geo.cov2d[(0, 1)] / det, geo.cov2d[(0, 0)] / det);
            let mean2d = cam.project_point(&geo.mean_cam);
            // conservative footprint: where the exponent can exceed MIN_POWER
            let mid = 0.5 * (geo.cov2d[(0, 0)] + geo.cov2d[(1, 1)]);
            let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
            let radius = (2.0 * -MIN_POWER * lambda_max).sqrt();
            let x0 = (mean2d.x - radius).floor();
            let x1 = (mean2d.x + radius).ceil();
            let y0 = (mean2d.y - radius).floor();
            let y1 = (mean2d.y + radius).ceil();
            if !(x1 >= 0.0 && y1 >= 0.0 && x0 < cam.width as f64 && y0 < cam.height as f64) {
                return None;
            }
            let clampx = |v: f64| v.clamp(0.0, cam.width as f64) as usize;
            let clampy = |v: f64| v.clamp(0.0, cam.height as f64) as usize;
            let bbox = [clampx(x0), clampy(y0), clampx(x1), clampy(y1)];
            let g = &cloud.gaussians[i];
            let basis = sh_basis(geo.view_dir);
            let mut color = vec![0.0; bands];
            crate::scene::radiance_into(&g.sh, Some(offsets), &basis, &mut color);
            Some(Splat {
                index: i,
                depth: geo.mean_cam.z,
                mean2d,
                conic: [a, b, c],
                opacity: sigmoid(g.opacity_logit),
                color,
                bbox,
            })
        })
        .collect();
    splats.sort_by(|p, q| p.depth.total_cmp(&q.depth).then(p.index.cmp(&q.index)));
    splats
}

struct TileLayout {
    tiles_x: usize,
    tiles_y: usize,
}

impl TileLayout {
    fn new(cam: &CameraView) -> Self {
        Self {
            tiles_x: cam.width.div_ceil(TILE),
            tiles_y: cam.height.div_ceil(TILE),
        }
    }

    fn count(&self) -> usize {
        self.tiles_x * self.tiles_y
    }

    /// Pixel ranges `(x0, y0, x1, y1)` covered by tile `t`.
    fn bounds(&self, t: usize, cam: &CameraView) -> [usize; 4] {
        let (tx, ty) = (t % self.tiles_x, t / self.tiles_x);
        [
            tx * TILE,
            ty * TILE,
            ((tx + 1) * TILE).min(cam.width),
            ((ty + 1) * TILE).min(cam.height),
        ]
    }

    /// Depth-ordered splat indices overlapping each tile.
    fn bin(&self, splats: &[Splat], cam: &CameraView) -> Vec<Vec<usize>> {
        let mut bins = vec![Vec::new(); self.count()];
        for (s, splat) in splats.iter().enumerate() {
            let [x0, y0, x1, y1] = splat.bbox;
            if x1 <= x0 || y1 <= y0 {
                continue;
            }
            let tx0 = x0 / TILE;
            let ty0 = y0 / TILE;
            let tx1 = (x1 - 1) / TILE;
            let ty1 = (y1 - 1) / TILE;
            for ty in ty0..=ty1.min(self.tiles_y - 1) {
                for tx in tx0..=tx1.min(self.tiles_x - 1) {
                    bins[ty * self.tiles_x + tx].push(s);
                }
            }
        }
        let _ = cam;
        bins
    }
}

#[inline]
fn falloff(splat: &Splat, px: f64, py: f64) -> Option<(f64, f64, f64)> {
    let dx = px - splat.mean2d.x;
    let dy = py - splat.mean2d.y;
    let [a, b, c] = splat.conic;
    let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
    if power < MIN_POWER || power > 0.0 {
        return None;
    }
    Some((power.exp(), dx, dy))
}

pub fn render(cloud: &GaussianCloud, cam: &CameraView, offsets: &[f64]) -> Result<RenderedView> {
    check_offsets(cloud, offsets)?;
    let bands = cloud.bands();
    let splats = project(cloud, cam, offsets);
    let layout = TileLayout::new(cam);
    let bins = layout.bin(&splats, cam);

    let tiles: Vec<(Vec<f64>, Vec<f64>)> = (0..layout.count())
        .into_par_iter()
        .map(|t| {
            let [x0, y0, x1, y1] = layout.bounds(t, cam);
            let tw = x1 - x0;
            let mut color = vec![0.0; (y1 - y0) * tw * bands];
            let mut alpha = vec![0.0; (y1 - y0) * tw];
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let local = (y - y0) * tw + (x - x0);
                    let out = &mut color[local * bands..(local + 1) * bands];
                    let mut trans = 1.0;
                    for &s in &bins[t] {
                        let splat = &splats[s];
                        let [bx0, by0, bx1, by1] = splat.bbox;
                        if x < bx0 || x >= bx1 || y < by0 || y >= by1 {
                            continue;
                        }
                        let Some((g, _, _)) = falloff(splat, px, py) else { continue };
                        let a = (splat.opacity * g).min(MAX_ALPHA);
                        let w = trans * a;
                        for (o, c) in out.iter_mut().zip(&splat.color) {
                            *o += w * c;
                        }
                        alpha[local] += w;
                        trans *= 1.0 - a;
                        if trans < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                }
            }
            (color, alpha)
        })
        .collect();

    let mut data = vec![0.0; cam.width * cam.height * bands];
    let mut alpha = vec![0.0; cam.width * cam.height];
    for (t, (tc, ta)) in tiles.into_iter().enumerate() {
        let [x0, y0, x1, y1] = layout.bounds(t, cam);
        let tw = x1 - x0;
        for y in y0..y1 {
            let src = (y - y0) * tw;
            let dst = y * cam.width + x0;
            alpha[dst..dst + tw].copy_from_slice(&ta[src..src + tw]);
            data[dst * bands..(dst + tw) * bands].copy_from_slice(&tc[src * bands..(src + tw) * bands]);
        }
    }
    let mut visible = vec![false; cloud.len()];
    for s in &splats {
        visible[s.index] = true;
    }
    Ok(RenderedView {
        cube: HyperCube::new(cam.height, cam.width, cloud.wavelengths().to_vec(), data)?,
        alpha,
        visible,
    })
}

/// Per-splat gradient accumulated over pixels.
#[derive(Clone)]
struct SplatGrad {
    mean2d: Vector2<f64>,
    conic: [f64; 3],
    opacity: f64,
    color: Vec<f64>,
}

impl SplatGrad {
    fn zeros(bands: usize) -> Self {
        Self {
            mean2d: Vector2::zeros(),
            conic: [0.0; 3],
            opacity: 0.0,
            color: vec![0.0; bands],
        }
    }

    fn add(&mut self, o: &SplatGrad) {
        self.mean2d += o.mean2d;
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.opacity += o.opacity;
        for (a, b) in self.color.iter_mut().zip(&o.color) {
            *a += b;
        }
    }
}

struct Contribution {
    slot: usize,
    g: f64,
    alpha: f64,
    clamped: bool,
    trans: f64,
    dx: f64,
    dy: f64,
}

pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &CameraView,
    offsets: &[f64],
    d_cube: &HyperCube,
) -> Result<RenderGradients> {
    check_offsets(cloud, offsets)?;
    let bands = cloud.bands();
    if d_cube.height() != cam.height || d_cube.width() != cam.width || d_cube.bands() != bands {
        return Err(Error::Shape(format!(
            "upstream gradient {}x{}x{} does not match render {}x{}x{}",
            d_cube.height(),
            d_cube.width(),
            d_cube.bands(),
            cam.height,
            cam.width,
            bands
        )));
    }
    let splats = project(cloud, cam, offsets);
    let layout = TileLayout::new(cam);
    let bins = layout.bin(&splats, cam);
    let upstream = d_cube.data();

    let partials: Vec<Vec<SplatGrad>> = (0..layout.count())
        .into_par_iter()
        .map(|t| {
            let list = &bins[t];
            let mut grads = vec![SplatGrad::zeros(bands); list.len()];
            let [x0, y0, x1, y1] = layout.bounds(t, cam);
            let mut contribs: Vec<Contribution> = Vec::new();
            let mut suffix = vec![0.0; bands];
            for y in y0..y1 {
                for x in x0..x1 {
                    let pix = y * cam.width + x;
                    let d_pix = &upstream[pix * bands..(pix + 1) * bands];
                    if d_pix.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    contribs.clear();
                    let mut trans = 1.0;
                    for (slot, &s) in list.iter().enumerate() {
                        let splat = &splats[s];
                        let [bx0, by0, bx1, by1] = splat.bbox;
                        if x < bx0 || x >= bx1 || y < by0 || y >= by1 {
                            continue;
                        }
                        let Some((g, dx, dy)) = falloff(splat, px, py) else { continue };
                        let raw = splat.opacity * g;
                        let clamped = raw > MAX_ALPHA;
                        let a = raw.min(MAX_ALPHA);
                        contribs.push(Contribution {
                            slot,
                            g,
                            alpha: a,
                            clamped,
                            trans,
                            dx,
                            dy,
                        });
                        trans *= 1.0 - a;
                        if trans < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    suffix.iter_mut().for_each(|v| *v = 0.0);
                    for c in contribs.iter().rev() {
                        let splat = &splats[list[c.slot]];
                        let gr = &mut grads[c.slot];
                        let w = c.trans * c.alpha;
                        let mut d_alpha = 0.0;
                        for b in 0..bands {
                            gr.color[b] += d_pix[b] * w;
                            d_alpha += d_pix[b] * (c.trans * splat.color[b] - suffix[b] / (1.0 - c.alpha));
                            suffix[b] += w * splat.color[b];
                        }
                        if c.clamped {
                            continue;
                        }
                        gr.opacity += d_alpha * c.g;
                        let d_power = d_alpha * splat.opacity * c.g;
                        let [a, b, cc] = splat.conic;
                        gr.mean2d.x += d_power * (a * c.dx + b * c.dy);
                        gr.mean2d.y += d_power * (b * c.dx + cc * c.dy);
                        gr.conic[0] += d_power * -0.5 * c.dx * c.dx;
                        gr.conic[1] += d_power * -c.dx * c.dy;
                        gr.conic[2] += d_power * -0.5 * c.dy * c.dy;
                    }
                }
            }
            grads
        })
        .collect();

    // deterministic merge in tile order
    let mut per_splat = vec![SplatGrad::zeros(bands); splats.len()];
    for (t, grads) in partials.iter().enumerate() {
        for (slot, g) in grads.iter().enumerate() {
            per_splat[bins[t][slot]].add(g);
        }
    }

    let center = cam.center();
    let chained: Vec<(usize, GaussianGrad, Vec<f64>, f64)> = splats
        .par_iter()
        .zip(per_splat.par_iter())
        .map(|(splat, sg)| {
            let (gg, d_off) = chain_gaussian(cloud, splat.index, cam, &center, offsets, sg);
            (splat.index, gg, d_off, sg.mean2d.norm())
        })
        .collect();

    let mut gaussians = vec![GaussianGrad::zeros(bands); cloud.len()];
    let mut d_offsets = vec![0.0; bands * SH_COEFFS];
    let mut screen_grad = vec![0.0; cloud.len()];
    let mut visible = vec![false; cloud.len()];
    for (i, gg, d_off, sg) in chained {
        gaussians[i] = gg;
        for (a, b) in d_offsets.iter_mut().zip(&d_off) {
            *a += b;
        }
        screen_grad[i] = sg;
        visible[i] = true;
    }
    Ok(RenderGradients {
        gaussians,
        d_offsets,
        screen_grad,
        visible,
    })
}

/// Pushes screen-space gradients of one splat back to the Gaussian's
/// parameters and to the shared SH offsets.
fn chain_gaussian(
    cloud: &GaussianCloud,
    i: usize,
    cam: &CameraView,
    cam_center: &Vector3<f64>,
    offsets: &[f64],
    sg: &SplatGrad,
) -> (GaussianGrad, Vec<f64>) {
    let bands = cloud.bands();
    let g = &cloud.gaussians[i];
    let geo = geometry(cloud, i, cam, cam_center).expect("visible splat has valid geometry");
    let mut out = GaussianGrad::zeros(bands);
    let mut d_off = vec![0.0; bands * SH_COEFFS];

    let sig = sigmoid(g.opacity_logit);
    out.d_opacity_logit = sg.opacity * sig * (1.0 - sig);

    // SH radiance
    let basis = sh_basis(geo.view_dir);
    let mut d_basis = [0.0; SH_COEFFS];
    for b in 0..bands {
        let row = &g.sh[b * SH_COEFFS..(b + 1) * SH_COEFFS];
        let orow = &offsets[b * SH_COEFFS..(b + 1) * SH_COEFFS];
        let raw: f64 = (0..SH_COEFFS).map(|k| (row[k] + orow[k]) * basis[k]).sum::<f64>() + 0.5;
        if raw <= 0.0 {
            continue;
        }
        let dc = sg.color[b];
        for k in 0..SH_COEFFS {
            let v = dc * basis[k];
            out.d_sh[b * SH_COEFFS + k] = v;
            d_off[b * SH_COEFFS + k] = v;
            d_basis[k] += dc * (row[k] + orow[k]);
        }
    }
    let mut d_mean = sh_basis_backward(geo.view_dir, &d_basis);

    // conic = inverse(cov2d)
    let conic = geo.cov2d.try_inverse().expect("positive determinant");
    let g_conic = Matrix2::new(sg.conic[0], 0.5 * sg.conic[1], 0.5 * sg.conic[1], sg.conic[2]);
    let g_cov2d = -(conic * g_conic * conic);

    // cov2d = J Σc J^T + floor
    let g_sigma_cam = geo.jac.transpose() * g_cov2d * geo.jac;
    let g_jac = 2.0 * g_cov2d * geo.jac * geo.sigma_cam;

    // mean2d and J both depend on the camera-space mean
    let (x, y, z) = (geo.mean_cam.x, geo.mean_cam.y, geo.mean_cam.z);
    let mut d_cam = geo.jac.transpose() * sg.mean2d;
    let (fx, fy) = (cam.fx, cam.fy);
    d_cam.x += g_jac[(0, 2)] * (-fx / (z * z));
    d_cam.y += g_jac[(1, 2)] * (-fy / (z * z));
    d_cam.z += g_jac[(0, 0)] * (-fx / (z * z))
        + g_jac[(0, 2)] * (2.0 * fx * x / (z * z * z))
        + g_jac[(1, 1)] * (-fy / (z * z))
        + g_jac[(1, 2)] * (2.0 * fy * y / (z * z * z));
    d_mean += cam.rotation.transpose() * d_cam;
    out.d_mean = d_mean;

    // Σc = W Σ W^T, Σ = M M^T, M = R diag(s)
    let g_sigma = cam.rotation.transpose() * g_sigma_cam * cam.rotation;
    let g_sigma = 0.5 * (g_sigma + g_sigma.transpose());
    let rot = quat_to_matrix(&g.rotation);
    let scale = g.scale();
    let m = rot * Matrix3::from_diagonal(&scale);
    let g_m = 2.0 * g_sigma * m;
    let mut g_rot = Matrix3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            g_rot[(r, c)] = g_m[(r, c)] * scale[c];
        }
    }
    for c in 0..3 {
        let ds: f64 = (0..3).map(|r| g_m[(r, c)] * rot[(r, c)]).sum();
        out.d_log_scale[c] = ds * scale[c];
    }
    out.d_rotation = quat_to_matrix_backward(&g.rotation, &g_rot);
    (out, d_off)
}

/// Running per-Gaussian screen-gradient statistics for densification.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DensifyStats {
    pub grad_sum: Vec<f64>,
    pub visible_count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(count: usize) -> Self {
        Self {
            grad_sum: vec![0.0; count],
            visible_count: vec![0; count],
        }
    }

    pub fn mean_grad(&self, i: usize) -> f64 {
        match self.visible_count[i] {
            0 => 0.0,
            n => self.grad_sum[i] / n as f64,
        }
    }

    pub fn reset(&mut self, count: usize) {
        *self = Self::new(count);
    }
}

/// Folds one view's screen-space gradient norms into the running statistics.
pub fn accumulate_screen_gradients(view: &RenderedView, grads: &RenderGradients, stats: &mut DensifyStats) -> Result<()> {
    let n = view.visible.len();
    if grads.screen_grad.len() != n || stats.grad_sum.len() != n {
        return Err(Error::Shape(format!(
            "statistics for {} Gaussians, view has {n}",
            stats.grad_sum.len()
        )));
    }
    for i in 0..n {
        if view.visible[i] {
            stats.grad_sum[i] += grads.screen_grad[i];
            stats.visible_count[i] += 1;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{logit, Gaussian};
    use crate::sh::SH_C0;

    fn front_camera(size: usize) -> CameraView {
        CameraView::new(
            size as f64,
            size as f64,
            size as f64 / 2.0,
            size as f64 / 2.0,
            size,
            size,
            Matrix3::identity(),
            Vector3::new(0.0, 0.0, 0.0),
        )
        .unwrap()
    }

    fn dc_gaussian(mean: Vector3<f64>, scale: f64, opacity: f64, value: f64, bands: usize) -> Gaussian {
        let mut sh = vec![0.0; bands * SH_COEFFS];
        for b in 0..bands {
            sh[b * SH_COEFFS] = (value - 0.5) / SH_C0;
        }
        Gaussian::isotropic(mean, scale, opacity, sh)
    }

    #[test]
    fn single_opaque_gaussian_center_pixel() {
        let cam = front_camera(9);
        // projects to pixel center (4.5, 4.5)
        let g = dc_gaussian(Vector3::new(0.0, 0.0, 5.0), 50.0, 1.0 - 1e-12, 0.7, 2);
        let cloud = GaussianCloud::new(vec![g], vec![500.0, 600.0]).unwrap();
        let view = render(&cloud, &cam, &vec![0.0; 32]).unwrap();
        for b in 0..2 {
            assert!((view.cube.get(4, 4, b) - 0.99 * 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn two_coincident_gaussians_blend() {
        let cam = front_camera(9);
        let mut front = dc_gaussian(Vector3::new(0.0, 0.0, 5.0), 100.0, 0.5, 0.2, 1);
        let back = dc_gaussian(Vector3::new(0.0, 0.0, 6.0), 100.0, 1.0 - 1e-12, 0.8, 1);
        front.opacity_logit = logit(0.5);
        let cloud = GaussianCloud::new(vec![back, front], vec![500.0]).unwrap();
        let view = render(&cloud, &cam, &vec![0.0; 16]).unwrap();
        // centre pixel: falloff of the huge Gaussians is ~1
        let v = view.cube.get(4, 4, 0);
        assert!((v - (0.5 * 0.2 + 0.5 * 0.99 * 0.8)).abs() < 1e-6, "{v}");
    }

    #[test]
    fn culled_scene_is_background() {
        let cam = front_camera(8);
        let g = dc_gaussian(Vector3::new(0.0, 0.0, -3.0), 1.0, 0.9, 0.7, 3);
        let cloud = GaussianCloud::new(vec![g], vec![1.0, 2.0, 3.0]).unwrap();
        let view = render(&cloud, &cam, &vec![0.0; 48]).unwrap();
        assert!(view.cube.data().iter().all(|&v| v == 0.0));
        assert!(!view.visible[0]);
    }

    #[test]
    fn offsets_shape_is_checked() {
        let cam = front_camera(8);
        let cloud = GaussianCloud::new(vec![dc_gaussian(Vector3::z() * 3.0, 1.0, 0.5, 0.5, 2)], vec![1.0, 2.0]).unwrap();
        assert!(render(&cloud, &cam, &[0.0; 16]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let cam = front_camera(8);
        let g = dc_gaussian(Vector3::new(0.1, -0.1, 3.0), 0.3, 0.6, 0.4, 2);
        let cloud = GaussianCloud::new(vec![g], vec![1.0, 2.0]).unwrap();
        let zero = HyperCube::zeros(8, 8, vec![1.0, 2.0]).unwrap();
        let grads = render_backward(&cloud, &cam, &vec![0.0; 32], &zero).unwrap();
        assert!(grads.gaussians[0].flatten().iter().all(|&v| v == 0.0));
        assert!(grads.d_offsets.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dc_gradient_of_isolated_gaussian() {
        // d C / d SH_dc = T α Y00 at the centre pixel
        let cam = front_camera(9);
        let g = dc_gaussian(Vector3::new(0.0, 0.0, 5.0), 0.05, 0.8, 0.6, 1);
        let cloud = GaussianCloud::new(vec![g], vec![500.0]).unwrap();
        let mut up = vec![0.0; 81];
        up[4 * 9 + 4] = 1.0;
        let d_cube = HyperCube::new(9, 9, vec![500.0], up).unwrap();
        let grads = render_backward(&cloud, &cam, &vec![0.0; 16], &d_cube).unwrap();
        assert!((grads.gaussians[0].d_sh[0] - 0.8 * SH_C0).abs() < 1e-12);
    }

    #[test]
    fn screen_gradient_statistics() {
        let view = RenderedView {
            cube: HyperCube::zeros(1, 1, vec![1.0]).unwrap(),
            alpha: vec![0.0],
            visible: vec![true, false],
        };
        let mut stats = DensifyStats::new(2);
        for v in [0.1, 0.3] {
            let grads = RenderGradients {
                gaussians: vec![],
                d_offsets: vec![],
                screen_grad: vec![v, 0.0],
                visible: vec![true, false],
            };
            accumulate_screen_gradients(&view, &grads, &mut stats).unwrap();
        }
        assert!((stats.mean_grad(0) - 0.2).abs() < 1e-15);
        assert_eq!(stats.visible_count[1], 0);
        assert_eq!(stats.mean_grad(1), 0.0);
        let mut fresh = DensifyStats::new(2);
        let zero = RenderGradients {
            gaussians: vec![],
            d_offsets: vec![],
            screen_grad: vec![0.0, 0.0],
            visible: vec![true, false],
        };
        accumulate_screen_gradients(&view, &zero, &mut fresh).unwrap();
        assert_eq!(fresh.mean_grad(0), 0.0);
    }
}
