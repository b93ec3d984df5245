//! Image quality metrics, difference heatmaps and pseudo-RGB previews.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::hypercube::HyperCube;
use crate::losses;

/// Absolute error mapped to white in heatmaps.
pub const HEATMAP_MAX_ERROR: f64 = 0.2;

pub const METRIC_CSV_HEADER: &str = "view,variant,psnr,ssim,sam,rmse";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricTable {
    /// `f64::INFINITY` when the inputs are identical.
    pub psnr: f64,
    pub ssim: f64,
    pub sam: f64,
    pub rmse: f64,
}

impl MetricTable {
    pub fn compute(pred: &HyperCube, gt: &HyperCube) -> Result<Self> {
        Ok(Self {
            psnr: psnr(pred, gt, 1.0)?,
            ssim: ssim_metric(pred, gt)?,
            sam: sam(pred, gt)?,
            rmse: rmse(pred, gt)?,
        })
    }

    /// Field-wise arithmetic mean.
    pub fn mean(tables: &[MetricTable]) -> Option<Self> {
        if tables.is_empty() {
            return None;
        }
        let n = tables.len() as f64;
        let avg = |f: fn(&MetricTable) -> f64| tables.iter().map(f).sum::<f64>() / n;
        Some(Self {
            psnr: avg(|t| t.psnr),
            ssim: avg(|t| t.ssim),
            sam: avg(|t| t.sam),
            rmse: avg(|t| t.rmse),
        })
    }
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.9}")
    }
}

/// One CSV line per `(view, variant, metrics)` under [`METRIC_CSV_HEADER`].
pub fn metrics_csv(rows: &[(String, String, MetricTable)]) -> String {
    let mut s = String::from(METRIC_CSV_HEADER);
    s.push('\n');
    for (view, variant, m) in rows {
        let _ = writeln!(
            s,
            "{view},{variant},{},{},{},{}",
            fmt_metric(m.psnr),
            fmt_metric(m.ssim),
            fmt_metric(m.sam),
            fmt_metric(m.rmse)
        );
    }
    s
}

pub fn write_metrics_csv(rows: &[(String, String, MetricTable)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

fn mse(pred: &HyperCube, gt: &HyperCube) -> Result<f64> {
    pred.ensure_same_shape(gt)?;
    let sum: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / pred.len() as f64)
}

/// `10 log10(max² / MSE)`; `+inf` for identical inputs.
pub fn psnr(pred: &HyperCube, gt: &HyperCube, max_value: f64) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_value * max_value / m).log10())
}

pub fn rmse(pred: &HyperCube, gt: &HyperCube) -> Result<f64> {
    Ok(mse(pred, gt)?.sqrt())
}

/// Mean spectral angle in radians over pixels whose ground-truth spectrum
/// has positive norm. A zero predicted spectrum counts as orthogonal.
pub fn sam(pred: &HyperCube, gt: &HyperCube) -> Result<f64> {
    pred.ensure_same_shape(gt)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for px in 0..pred.pixels() {
        let p = pred.spectrum_at(px);
        let g = gt.spectrum_at(px);
        let ng = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ng == 0.0 {
            continue;
        }
        let np = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        count += 1;
        if np == 0.0 {
            sum += std::f64::consts::FRAC_PI_2;
            continue;
        }
        let d: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        sum += (d / (np * ng)).clamp(-1.0, 1.0).acos();
    }
    if count == 0 {
        return Err(Error::InvalidArgument("SAM undefined: every ground-truth spectrum is zero".into()));
    }
    Ok(sum / count as f64)
}

/// Structural similarity with the same window and constants as the loss.
pub fn ssim_metric(pred: &HyperCube, gt: &HyperCube) -> Result<f64> {
    losses::ssim(pred, gt)
}

/// `(wavelength, value)` pairs of one pixel.
pub fn spectral_curve(cube: &HyperCube, row: usize, col: usize) -> Result<Vec<(f64, f64)>> {
    let s = cube.pixel_spectrum(row, col)?;
    Ok(cube.wavelengths().iter().copied().zip(s.0).collect())
}

/// Single-channel map of mean absolute error over a band range.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    /// Linear `[0, 0.2] -> [0, 255]`, rounding half up.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|e| (e / HEATMAP_MAX_ERROR * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, self.to_gray8())
            .ok_or_else(|| Error::Shape("heatmap buffer size".into()))?;
        img.save(path.as_ref())?;
        Ok(())
    }
}

pub fn diff_heatmap(pred: &HyperCube, gt: &HyperCube, bands: Range<usize>) -> Result<Heatmap> {
    pred.ensure_same_shape(gt)?;
    if bands.is_empty() || bands.end > pred.bands() {
        return Err(Error::InvalidArgument(format!(
            "band range {bands:?} is empty or exceeds {} bands",
            pred.bands()
        )));
    }
    let k = bands.len() as f64;
    let values = (0..pred.pixels())
        .map(|px| {
            let p = &pred.spectrum_at(px)[bands.clone()];
            let g = &gt.spectrum_at(px)[bands.clone()];
            p.iter().zip(g).map(|(a, b)| (a - b).abs()).sum::<f64>() / k
        })
        .collect();
    Ok(Heatmap {
        height: pred.height(),
        width: pred.width(),
        values,
    })
}

const CIE_START: f64 = 380.0;
const CIE_STEP: f64 = 5.0;
const CIE_SAMPLES: usize = 81;
pub const VISIBLE_MIN: f64 = 380.0;
pub const VISIBLE_MAX: f64 = 750.0;

fn lobe(l: f64, mu: f64, s1: f64, s2: f64) -> f64 {
    let s = if l < mu { s1 } else { s2 };
    (-0.5 * ((l - mu) / s).powi(2)).exp()
}

/// Multi-lobe analytic fit of the CIE 1931 2° observer.
fn cie_fit(l: f64) -> [f64; 3] {
    [
        1.056 * lobe(l, 599.8, 37.9, 31.0) + 0.362 * lobe(l, 442.0, 16.0, 26.7) - 0.065 * lobe(l, 501.1, 20.4, 26.2),
        0.821 * lobe(l, 568.8, 46.9, 40.5) + 0.286 * lobe(l, 530.9, 16.3, 31.1),
        1.217 * lobe(l, 437.0, 11.8, 36.0) + 0.681 * lobe(l, 459.0, 26.0, 13.8),
    ]
}

/// 5 nm table over 380-780 nm.
fn cie_table() -> &'static [[f64; 3]; CIE_SAMPLES] {
    static TABLE: OnceLock<[[f64; 3]; CIE_SAMPLES]> = OnceLock::new();
    TABLE.get_or_init(|| std::array::from_fn(|i| cie_fit(CIE_START + CIE_STEP * i as f64)))
}

/// Color matching functions linearly interpolated from the 5 nm table;
/// zero outside it.
pub fn cie_xyz(lambda: f64) -> [f64; 3] {
    let t = cie_table();
    let pos = (lambda - CIE_START) / CIE_STEP;
    if pos < 0.0 || pos > (CIE_SAMPLES - 1) as f64 {
        return [0.0; 3];
    }
    let i = (pos.floor() as usize).min(CIE_SAMPLES - 2);
    let f = pos - i as f64;
    std::array::from_fn(|k| t[i][k] * (1.0 - f) + t[i + 1][k] * f)
}

fn trapezoid_weights(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| {
            let left = if i > 0 { x[i] - x[i - 1] } else { 0.0 };
            let right = if i + 1 < n { x[i + 1] - x[i] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// Per-band XYZ weights, scaled so a flat unit spectrum has `Y = 1`.
fn xyz_weights(wavelengths: &[f64]) -> Result<Vec<[f64; 3]>> {
    if !wavelengths.iter().any(|l| (VISIBLE_MIN..=VISIBLE_MAX).contains(l)) {
        return Err(Error::InvalidArgument(format!(
            "pseudo-RGB needs a band in [{VISIBLE_MIN}, {VISIBLE_MAX}] nm, got {:.1}..{:.1}",
            wavelengths[0],
            wavelengths[wavelengths.len() - 1]
        )));
    }
    let tw = trapezoid_weights(wavelengths);
    let mut w: Vec<[f64; 3]> = wavelengths
        .iter()
        .zip(&tw)
        .map(|(&l, &t)| {
            let c = cie_xyz(l);
            [c[0] * t, c[1] * t, c[2] * t]
        })
        .collect();
    let ysum: f64 = w.iter().map(|v| v[1]).sum();
    if ysum <= 0.0 {
        return Err(Error::InvalidArgument("visible bands carry no luminance weight".into()));
    }
    for v in &mut w {
        v.iter_mut().for_each(|c| *c /= ysum);
    }
    Ok(w)
}

/// Linear XYZ per pixel.
pub fn cube_to_xyz(cube: &HyperCube) -> Result<Vec<[f64; 3]>> {
    let w = xyz_weights(cube.wavelengths())?;
    Ok((0..cube.pixels())
        .map(|px| {
            let s = cube.spectrum_at(px);
            let mut out = [0.0; 3];
            for (v, wb) in s.iter().zip(&w) {
                for k in 0..3 {
                    out[k] += v * wb[k];
                }
            }
            out
        })
        .collect())
}

fn srgb_gamma(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn xyz_to_srgb(xyz: [f64; 3]) -> [f64; 3] {
    let [x, y, z] = xyz;
    let lin = [
        3.2406 * x - 1.5372 * y - 0.4986 * z,
        -0.9689 * x + 1.8758 * y + 0.0415 * z,
        0.0557 * x - 0.2040 * y + 1.0570 * z,
    ];
    lin.map(srgb_gamma)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .flat_map(|p| p.map(|v| (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8))
            .collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::Shape("rgb buffer size".into()))?;
        img.save(path.as_ref())?;
        Ok(())
    }
}

pub fn pseudo_rgb(cube: &HyperCube) -> Result<RgbImage> {
    let xyz = cube_to_xyz(cube)?;
    Ok(RgbImage {
        height: cube.height(),
        width: cube.width(),
        pixels: xyz.into_iter().map(xyz_to_srgb).collect(),
    })
}
