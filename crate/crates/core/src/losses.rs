//! Training objectives on N-band cubes, each returning its value together
//! with the gradient with respect to the predicted cube.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hypercube::HyperCube;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    pub spectral: f64,
    pub diffusion: f64,
    /// KL term weight inside the spectral loss.
    pub alpha: f64,
    /// Cosine term weight inside the spectral loss.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 0.8,
            ssim: 0.2,
            spectral: 0.05,
            diffusion: 1.0,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.ssim, self.spectral, self.diffusion, self.alpha, self.beta];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if [self.l1, self.ssim, self.spectral, self.diffusion].iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one of the loss weights w1..w4 must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub l1: f64,
    /// Similarity (not the loss); the objective uses `1 - ssim`.
    pub ssim: f64,
    pub spectral_kl: f64,
    pub spectral_cos: f64,
    pub diffusion: f64,
}

impl LossReport {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.l1 * self.l1
            + w.ssim * (1.0 - self.ssim)
            + w.spectral * (w.alpha * self.spectral_kl + w.beta * self.spectral_cos)
            + w.diffusion * self.diffusion
    }

    /// `step,total,l1,ssim,kl,cos,diff`
    pub fn csv_line(&self, step: usize) -> String {
        format!(
            "{step},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.total, self.l1, self.ssim, self.spectral_kl, self.spectral_cos, self.diffusion
        )
    }

    /// First component that is not finite, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("l1", self.l1),
            ("ssim", self.ssim),
            ("spectral_kl", self.spectral_kl),
            ("spectral_cos", self.spectral_cos),
            ("diffusion", self.diffusion),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

pub const LOSS_CSV_HEADER: &str = "step,total,l1,ssim,kl,cos,diff";

/// Mean absolute error with gradient `sign(pred - gt) / len` (0 at ties).
pub fn l1_loss(pred: &HyperCube, gt: &HyperCube) -> Result<(f64, HyperCube)> {
    pred.ensure_same_shape(gt)?;
    let n = pred.len() as f64;
    let mut sum = 0.0;
    let grad: Vec<f64> = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| {
            let d = p - g;
            sum += d.abs();
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((sum / n, pred.with_data(grad)?))
}

/// Normalized 1D Gaussian window.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let ks = k.len();
    let (ho, wo) = (h - ks + 1, w - ks + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        for x in 0..wo {
            tmp[y * wo + x] = k.iter().zip(&row[x..x + ks]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in k.iter().enumerate() {
                acc += kv * tmp[(y + i) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(d: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let ks = k.len();
    let (ho, wo) = (h - ks + 1, w - ks + 1);
    let mut tmp = vec![0.0; h * wo];
    for y in 0..ho {
        for x in 0..wo {
            let v = d[y * wo + x];
            for (i, kv) in k.iter().enumerate() {
                tmp[(y + i) * wo + x] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..wo {
            let v = tmp[y * wo + x];
            for (j, kv) in k.iter().enumerate() {
                out[y * w + x + j] += kv * v;
            }
        }
    }
    out
}

fn band_plane(c: &HyperCube, band: usize) -> Vec<f64> {
    let n = c.bands();
    c.data().iter().skip(band).step_by(n).copied().collect()
}

/// Per-band SSIM sum over window positions and, optionally, its gradient
/// with respect to `x`.
fn ssim_band(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mx = filter_valid(x, h, w, k);
    let my = filter_valid(y, h, w, k);
    let exx = filter_valid(&xx, h, w, k);
    let eyy = filter_valid(&yy, h, w, k);
    let exy = filter_valid(&xy, h, w, k);
    let m = mx.len();
    let mut total = 0.0;
    let (mut d_mx, mut d_exx, mut d_exy) = if want_grad {
        (vec![0.0; m], vec![0.0; m], vec![0.0; m])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..m {
        let (ux, uy) = (mx[i], my[i]);
        let sxx = exx[i] - ux * ux;
        let syy = eyy[i] - uy * uy;
        let sxy = exy[i] - ux * uy;
        let a1 = 2.0 * ux * uy + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        let b1 = ux * ux + uy * uy + SSIM_C1;
        let b2 = sxx + syy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            d_mx[i] = (2.0 * uy * a2 - 2.0 * uy * a1) / (b1 * b2) - s * (2.0 * ux / b1 - 2.0 * ux / b2);
            d_exx[i] = -s / b2;
            d_exy[i] = 2.0 * a1 / (b1 * b2);
        }
    }
    if !want_grad {
        return (total, None);
    }
    let g_mx = filter_valid_adjoint(&d_mx, h, w, k);
    let g_exx = filter_valid_adjoint(&d_exx, h, w, k);
    let g_exy = filter_valid_adjoint(&d_exy, h, w, k);
    let grad = (0..h * w).map(|j| g_mx[j] + 2.0 * x[j] * g_exx[j] + y[j] * g_exy[j]).collect();
    (total, Some(grad))
}

fn ssim_impl(pred: &HyperCube, gt: &HyperCube, want_grad: bool) -> Result<(f64, Option<HyperCube>)> {
    pred.ensure_same_shape(gt)?;
    let (h, w, n) = (pred.height(), pred.width(), pred.bands());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let positions = ((h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1) * n) as f64;
    let per_band: Vec<(f64, Option<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|b| ssim_band(&band_plane(pred, b), &band_plane(gt, b), h, w, &k, want_grad))
        .collect();
    let value = per_band.iter().map(|(s, _)| s).sum::<f64>() / positions;
    if !want_grad {
        return Ok((value, None));
    }
    let mut grad = vec![0.0; pred.len()];
    for (b, (_, g)) in per_band.into_iter().enumerate() {
        for (j, v) in g.unwrap().into_iter().enumerate() {
            grad[j * n + b] = v / positions;
        }
    }
    Ok((value, Some(pred.with_data(grad)?)))
}

/// Mean SSIM over bands and valid window positions.
pub fn ssim(pred: &HyperCube, gt: &HyperCube) -> Result<f64> {
    Ok(ssim_impl(pred, gt, false)?.0)
}

/// `(1 - SSIM, d(1 - SSIM)/d pred)`.
pub fn ssim_loss(pred: &HyperCube, gt: &HyperCube) -> Result<(f64, HyperCube)> {
    let (s, g) = ssim_impl(pred, gt, true)?;
    let g = g.unwrap();
    let neg = g.map(|v| -v)?;
    Ok((1.0 - s, neg))
}

fn softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

fn log_softmax_into(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// Per-pixel softmax along the band axis.
pub fn spectral_normalize(cube: &HyperCube) -> HyperCube {
    let n = cube.bands();
    let mut out = vec![0.0; cube.len()];
    for (src, dst) in cube.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        softmax_into(src, dst);
    }
    cube.with_data(out).expect("softmax output is finite")
}

/// Pixel-mean KL and cosine terms of the spectral loss with their
/// separate gradients.
#[derive(Clone, Debug)]
pub struct SpectralTerms {
    pub kl: f64,
    pub cos: f64,
    pub grad_kl: HyperCube,
    pub grad_cos: HyperCube,
}

pub fn spectral_terms(pred: &HyperCube, gt: &HyperCube) -> Result<SpectralTerms> {
    pred.ensure_same_shape(gt)?;
    let n = pred.bands();
    let pixels = pred.pixels() as f64;
    let mut gkl = vec![0.0; pred.len()];
    let mut gcos = vec![0.0; pred.len()];
    let (mut kl, mut cos) = (0.0, 0.0);
    let mut p = vec![0.0; n];
    let mut lp = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut lq = vec![0.0; n];
    for px in 0..pred.pixels() {
        let x = pred.spectrum_at(px);
        let y = gt.spectrum_at(px);
        softmax_into(x, &mut p);
        log_softmax_into(x, &mut lp);
        softmax_into(y, &mut q);
        log_softmax_into(y, &mut lq);
        kl += (0..n).map(|i| q[i] * (lq[i] - lp[i])).sum::<f64>();
        let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nq = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dotpq: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
        let c = dotpq / (np * nq);
        cos += 1.0 - c;
        // d(1 - cos)/dp, then through the softmax Jacobian
        let gp: Vec<f64> = (0..n).map(|i| -(q[i] / (np * nq) - c * p[i] / (np * np))).collect();
        let inner: f64 = (0..n).map(|i| p[i] * gp[i]).sum();
        for i in 0..n {
            gkl[px * n + i] = (p[i] - q[i]) / pixels;
            gcos[px * n + i] = p[i] * (gp[i] - inner) / pixels;
        }
    }
    Ok(SpectralTerms {
        kl: kl / pixels,
        cos: cos / pixels,
        grad_kl: pred.with_data(gkl)?,
        grad_cos: pred.with_data(gcos)?,
    })
}

/// `α·mean KL(D_gt ‖ D_pred) + β·mean (1 - cos(D_gt, D_pred))`.
pub fn spectral_loss(pred: &HyperCube, gt: &HyperCube, alpha: f64, beta: f64) -> Result<(f64, HyperCube)> {
    let t = spectral_terms(pred, gt)?;
    let grad: Vec<f64> = t
        .grad_kl
        .data()
        .iter()
        .zip(t.grad_cos.data())
        .map(|(a, b)| alpha * a + beta * b)
        .collect();
    Ok((alpha * t.kl + beta * t.cos, pred.with_data(grad)?))
}

/// Weighted objective. `diffusion` carries the already-computed diffusion
/// loss and its gradient with respect to `pred` (if any).
pub fn total_loss(
    pred: &HyperCube,
    gt: &HyperCube,
    diffusion: Option<(f64, &HyperCube)>,
    weights: &LossWeights,
) -> Result<(LossReport, HyperCube)> {
    pred.ensure_same_shape(gt)?;
    let mut report = LossReport::default();
    let mut grad = vec![0.0; pred.len()];
    let mut add = |g: &HyperCube, w: f64| {
        for (a, b) in grad.iter_mut().zip(g.data()) {
            *a += w * b;
        }
    };
    let (l1, g_l1) = l1_loss(pred, gt)?;
    report.l1 = l1;
    if weights.l1 != 0.0 {
        add(&g_l1, weights.l1);
    }
    if weights.ssim != 0.0 {
        let (loss, g) = ssim_loss(pred, gt)?;
        report.ssim = 1.0 - loss;
        add(&g, weights.ssim);
    } else if pred.height() >= SSIM_WINDOW && pred.width() >= SSIM_WINDOW {
        report.ssim = ssim(pred, gt)?;
    } else {
        report.ssim = 1.0;
    }
    let spectral = spectral_terms(pred, gt)?;
    report.spectral_kl = spectral.kl;
    report.spectral_cos = spectral.cos;
    if weights.spectral != 0.0 {
        add(&spectral.grad_kl, weights.spectral * weights.alpha);
        add(&spectral.grad_cos, weights.spectral * weights.beta);
    }
    if let Some((value, g)) = diffusion {
        g.ensure_same_shape(pred)?;
        report.diffusion = value;
        if weights.diffusion != 0.0 {
            add(g, weights.diffusion);
        }
    }
    report.total = report.weighted_total(weights);
    Ok((report, pred.with_data(grad)?))
}
