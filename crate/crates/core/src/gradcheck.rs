//! Central finite-difference checks for every hand-written backward pass.
//!
//! Each check builds a small randomized instance, contracts the output with
//! a fixed random upstream tensor to get a scalar, and compares the analytic
//! gradient of that scalar against `(f(x+h) - f(x-h)) / 2h` per parameter.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{diffusion_loss_at, make_schedule, sample_noise, DenoiserConfig, DenoiserNet};
use crate::encoder::{encoder_backward, offsets_for, EncoderParams, WavelengthRange};
use crate::error::Result;
use crate::hypercube::HyperCube;
use crate::losses::{spectral_loss, ssim_loss};
use crate::rasterizer::{render, render_backward};
use crate::scene::{flatten_gaussian, logit, unflatten_gaussian, CameraView, Gaussian, GaussianCloud};
use crate::sh::{SH_C0, SH_COEFFS};

/// Outcome of one finite-difference comparison.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: &'static str,
    pub parameters: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Relative error with a floor that keeps entries whose true value is
/// numerically zero from dominating: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x` for every coordinate.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let up = f(&work);
            work[i] = orig - h;
            let down = f(&work);
            work[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A small random scene in front of a camera. Opacities stay below the
/// alpha clamp and colors stay positive so the objective is smooth.
pub fn random_scene(rng: &mut ChaCha8Rng, count: usize, size: usize, bands: usize) -> (GaussianCloud, CameraView) {
    let wavelengths: Vec<f64> = (0..bands).map(|b| 450.0 + 50.0 * b as f64).collect();
    let gaussians = (0..count)
        .map(|_| {
            let mut sh = vec![0.0; bands * SH_COEFFS];
            for b in 0..bands {
                sh[b * SH_COEFFS] = (rng.gen_range(0.3..0.8) - 0.5) / SH_C0;
                for k in 1..SH_COEFFS {
                    sh[b * SH_COEFFS + k] = rng.gen_range(-0.05..0.05);
                }
            }
            let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
            Gaussian {
                mean: Vector3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), rng.gen_range(-0.3..0.3)),
                rotation: q,
                log_scale: Vector3::new(
                    rng.gen_range(0.08f64..0.3).ln(),
                    rng.gen_range(0.08f64..0.3).ln(),
                    rng.gen_range(0.08f64..0.3).ln(),
                ),
                opacity_logit: logit(rng.gen_range(0.3..0.75)),
                sh,
            }
        })
        .collect();
    let cloud = GaussianCloud::new(gaussians, wavelengths).unwrap();
    let cam = CameraView::look_at(
        Vector3::new(0.3, -3.0, 0.6),
        Vector3::zeros(),
        Vector3::z(),
        size as f64 * 1.4,
        size,
        size,
    )
    .unwrap();
    (cloud, cam)
}

pub fn check_rasterizer(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (count, size, bands) = (5, 8, 4);
    let (cloud, cam) = random_scene(&mut rng, count, size, bands);
    let offsets: Vec<f64> = (0..bands * SH_COEFFS).map(|_| rng.gen_range(-0.03..0.03)).collect();
    let upstream: Vec<f64> = (0..size * size * bands).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let d_cube = HyperCube::new(size, size, cloud.wavelengths().to_vec(), upstream.clone())?;

    let grads = render_backward(&cloud, &cam, &offsets, &d_cube)?;
    let per = Gaussian::param_count(bands);
    let mut analytic: Vec<f64> = grads.gaussians.iter().flat_map(|g| g.flatten()).collect();
    analytic.extend_from_slice(&grads.d_offsets);

    let mut x: Vec<f64> = cloud.gaussians.iter().flat_map(flatten_gaussian).collect();
    x.extend_from_slice(&offsets);
    let wl = cloud.wavelengths().to_vec();
    let objective = |p: &[f64]| {
        let gs = p[..count * per].chunks_exact(per).map(unflatten_gaussian).collect();
        let c = GaussianCloud::new(gs, wl.clone()).unwrap();
        let view = render(&c, &cam, &p[count * per..]).unwrap();
        dot(view.cube.data(), &upstream)
    };
    let numeric = numeric_gradient(&x, 1e-3, objective);
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(CheckReport {
        name: "rasterizer",
        parameters: x.len(),
        max_rel_error: relative_error(&analytic, &numeric, 1e-9 * scale),
        tolerance: 1e-3,
    })
}

fn random_cube(rng: &mut ChaCha8Rng, h: usize, w: usize, bands: usize) -> HyperCube {
    let wl = (0..bands).map(|b| 450.0 + 40.0 * b as f64).collect();
    let data = (0..h * w * bands).map(|_| rng.gen_range(0.05..0.95)).collect();
    HyperCube::new(h, w, wl, data).unwrap()
}

fn report(name: &'static str, analytic: &[f64], numeric: &[f64]) -> CheckReport {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    CheckReport {
        name,
        parameters: analytic.len(),
        max_rel_error: relative_error(analytic, numeric, 1e-6 * scale),
        tolerance: 1e-3,
    }
}

/// Encoder parameters against a random contraction of the offsets.
pub fn check_encoder(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wavelengths = [420.0, 515.0, 640.0, 780.0, 905.0];
    let range = WavelengthRange::new(400.0, 1000.0)?;
    let mut enc = EncoderParams::new(3, &[8], &mut rng);
    enc.params.iter_mut().for_each(|p| *p += rng.gen_range(-0.3..0.3));
    let upstream: Vec<f64> = (0..wavelengths.len() * SH_COEFFS).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let analytic = encoder_backward(&enc, &wavelengths, range, &upstream)?;
    let numeric = numeric_gradient(&enc.params.clone(), 1e-5, |p| {
        let e = EncoderParams::from_parts(enc.num_frequencies, enc.hidden_sizes.clone(), p.to_vec()).unwrap();
        dot(&offsets_for(&e, &wavelengths, range).unwrap().values, &upstream)
    });
    Ok(report("encoder", &analytic, &numeric))
}

/// KL + cosine spectral loss with respect to the prediction.
pub fn check_spectral(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = random_cube(&mut rng, 8, 8, 5);
    let gt = random_cube(&mut rng, 8, 8, 5);
    let (alpha, beta) = (rng.gen_range(0.5..2.0), rng.gen_range(0.5..2.0));
    let (_, g) = spectral_loss(&pred, &gt, alpha, beta)?;
    let numeric = numeric_gradient(pred.data(), 1e-5, |p| {
        spectral_loss(&pred.with_data(p.to_vec()).unwrap(), &gt, alpha, beta).unwrap().0
    });
    Ok(report("spectral_loss", g.data(), &numeric))
}

/// `1 - SSIM` with respect to the prediction. Needs at least one full
/// 11x11 window, so the instance is 12x12x2.
pub fn check_ssim(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = random_cube(&mut rng, 12, 12, 2);
    let gt = random_cube(&mut rng, 12, 12, 2);
    let (_, g) = ssim_loss(&pred, &gt)?;
    let numeric = numeric_gradient(pred.data(), 1e-5, |p| {
        ssim_loss(&pred.with_data(p.to_vec()).unwrap(), &gt).unwrap().0
    });
    Ok(report("ssim_loss", g.data(), &numeric))
}

/// Noise-prediction loss with respect to the network parameters and the
/// conditioning render, on a toy network of about a thousand weights.
pub fn check_diffusion(seed: u64) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (size, bands) = (8, 2);
    let cfg = DenoiserConfig {
        width: 3,
        groups: 3,
        time_dim: 4,
        prior_std: DenoiserConfig::default().prior_std,
    };
    let mut net = DenoiserNet::new(bands, cfg, &mut rng)?;
    // leave the zero-initialized head and every other weight in general position
    net.params_mut().iter_mut().for_each(|p| *p += rng.gen_range(-0.2..0.2));
    let sched = make_schedule(50, 1e-4, 0.02)?;
    let gt = random_cube(&mut rng, size, size, bands);
    let render = random_cube(&mut rng, size, size, bands);
    let eps = sample_noise(&gt, &mut rng);
    let t = rng.gen_range(1..=50);
    let out = diffusion_loss_at(&net, &gt, &render, &sched, t, &eps)?;
    let np = net.param_count();
    let mut analytic = out.grad_params.clone();
    analytic.extend_from_slice(out.grad_render.data());
    let mut x = net.params().to_vec();
    x.extend_from_slice(render.data());
    let numeric = numeric_gradient(&x, 1e-5, |p| {
        let n = DenoiserNet::from_parts(bands, cfg, p[..np].to_vec()).unwrap();
        let r = render.with_data(p[np..].to_vec()).unwrap();
        diffusion_loss_at(&n, &gt, &r, &sched, t, &eps).unwrap().loss
    });
    Ok(report("diffusion_loss", &analytic, &numeric))
}

/// Every check, each on a few seeds; the worst seed is reported per module.
pub fn check_all() -> Result<Vec<CheckReport>> {
    type Check = fn(u64) -> Result<CheckReport>;
    let checks: [Check; 5] = [check_rasterizer, check_encoder, check_spectral, check_ssim, check_diffusion];
    checks
        .iter()
        .map(|c| {
            let mut worst: Option<CheckReport> = None;
            for seed in 0..3 {
                let r = c(seed)?;
                if worst.as_ref().map_or(true, |w| r.max_rel_error > w.max_rel_error) {
                    worst = Some(r);
                }
            }
            Ok(worst.unwrap())
        })
        .collect()
}
