//! Joint optimization of the Gaussian cloud, the wavelength encoder and the
//! denoiser, with adaptive density control and bit-exact checkpoints.

use std::path::Path;

use log::{debug, error, info};
use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::TrainConfig;
use crate::diffusion::{
    crop, cube_to_tensor, denoise_from, forward_noise, make_schedule, sample_noise, tensor_to_cube, DenoiserConfig,
    DenoiserNet, NoiseSchedule,
};
use crate::encoder::{encoder_backward, offsets_for, EncoderParams, WavelengthRange};
use crate::error::{Error, Result};
use crate::evalkit::MetricTable;
use crate::hypercube::HyperCube;
use crate::losses::{l1_loss, ssim_loss, total_loss, LossReport, LossWeights, SSIM_WINDOW};
use crate::nn::Tensor;
use crate::optim::{adam_step, Moments};
use crate::rasterizer::{accumulate_screen_gradients, render, render_backward, DensifyStats};
use crate::rng::{derive_seed, rng_for, RngState};
use crate::scene::{flatten_gaussian, quat_to_matrix, unflatten_gaussian, CameraView, Gaussian, GaussianCloud};
use crate::sh::{SH_C0, SH_COEFFS, SH_DEGREE};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DDHG";
const CHECKPOINT_VERSION: u32 = 1;
pub const SPLIT_SCALE_DIVISOR: f64 = 1.6;
const MEANS_EPS: f64 = 1e-15;
const DEFAULT_EPS: f64 = 1e-8;

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Bounds {
    pub fn cube(half: f64) -> Self {
        Self {
            min: Vector3::repeat(-half),
            max: Vector3::repeat(half),
        }
    }
}

/// A seed point with an optional spectrum for initialization.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedPoint {
    pub position: Vector3<f64>,
    pub spectrum: Option<Vec<f64>>,
}

fn mean_nn_distance(points: &[Vector3<f64>], i: usize) -> f64 {
    // average distance to the 3 nearest neighbours
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, p)| (p - points[i]).norm())
        .collect();
    if d.is_empty() {
        return 0.1;
    }
    d.sort_by(f64::total_cmp);
    let k = d.len().min(3);
    (d[..k].iter().sum::<f64>() / k as f64).max(1e-4)
}

/// Initial cloud: means from `points` when given, otherwise uniform in
/// `bounds`; isotropic scales at the mean nearest-neighbour distance;
/// opacity 0.1; DC from the point spectrum or `mean_spectrum`.
pub fn init_cloud(
    points: Option<&[SeedPoint]>,
    bounds: Bounds,
    count: usize,
    wavelengths: &[f64],
    mean_spectrum: &[f64],
    rng: &mut impl Rng,
) -> Result<GaussianCloud> {
    if count == 0 {
        return Err(Error::InvalidArgument("init_cloud needs count >= 1".into()));
    }
    if (0..3).any(|k| !(bounds.min[k] < bounds.max[k])) {
        return Err(Error::InvalidArgument(format!("empty init bounds {bounds:?}")));
    }
    if mean_spectrum.len() != wavelengths.len() {
        return Err(Error::Shape(format!(
            "mean spectrum has {} bands, expected {}",
            mean_spectrum.len(),
            wavelengths.len()
        )));
    }
    let seeds: Vec<SeedPoint> = match points {
        Some(p) if !p.is_empty() => p.to_vec(),
        _ => (0..count)
            .map(|_| SeedPoint {
                position: Vector3::from_fn(|k, _| rng.gen_range(bounds.min[k]..bounds.max[k])),
                spectrum: None,
            })
            .collect(),
    };
    let positions: Vec<Vector3<f64>> = seeds.iter().map(|s| s.position).collect();
    let n = wavelengths.len();
    let gaussians = seeds
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let spec = s.spectrum.as_deref().unwrap_or(mean_spectrum);
            if spec.len() != n {
                return Err(Error::Shape(format!("seed point {i} spectrum has {} bands", spec.len())));
            }
            let mut sh = vec![0.0; n * SH_COEFFS];
            for b in 0..n {
                sh[b * SH_COEFFS] = (spec[b] - 0.5) / SH_C0;
            }
            Ok(Gaussian::isotropic(s.position, mean_nn_distance(&positions, i), 0.1, sh))
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianCloud::new(gaussians, wavelengths.to_vec())
}

/// 1.1 x the largest camera distance from the camera centroid (at least 1).
pub fn scene_extent(cams: &[CameraView]) -> f64 {
    if cams.is_empty() {
        return 1.0;
    }
    let centers: Vec<Vector3<f64>> = cams.iter().map(|c| c.center()).collect();
    let mean = centers.iter().sum::<Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    (1.1 * r).max(1.0)
}

/// Training target paired with its camera.
#[derive(Clone, Debug)]
pub struct TrainView {
    pub id: usize,
    pub camera: CameraView,
    pub target: HyperCube,
}

impl TrainView {
    /// Clamps the target into `[0, 1]`.
    pub fn new(id: usize, camera: CameraView, target: &HyperCube) -> Self {
        Self {
            id,
            camera,
            target: target.clamped(0.0, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifySummary {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewMetrics {
    pub id: usize,
    pub raw: MetricTable,
    pub denoised: Option<MetricTable>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub mean_raw: MetricTable,
    pub mean_denoised: Option<MetricTable>,
}

impl EvalReport {
    /// Rows for [`crate::evalkit::write_metrics_csv`], means last.
    pub fn csv_rows(&self) -> Vec<(String, String, MetricTable)> {
        let mut rows = Vec::new();
        for v in &self.views {
            rows.push((format!("{:04}", v.id), "raw".to_string(), v.raw));
            if let Some(d) = v.denoised {
                rows.push((format!("{:04}", v.id), "denoised".to_string(), d));
            }
        }
        rows.push(("mean".into(), "raw".into(), self.mean_raw));
        if let Some(d) = self.mean_denoised {
            rows.push(("mean".into(), "denoised".into(), d));
        }
        rows
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub iteration: usize,
    pub cloud: GaussianCloud,
    pub encoder: EncoderParams,
    pub denoiser: DenoiserNet,
    pub schedule: NoiseSchedule,
    pub range: WavelengthRange,
    pub scene_extent: f64,
    pub moments_cloud: Moments,
    pub moments_encoder: Moments,
    pub moments_denoiser: Moments,
    pub stats: DensifyStats,
    /// Timesteps, noise and crops of the diffusion branch.
    pub rng_diffusion: ChaCha8Rng,
    /// Split sampling during densification.
    pub rng_densify: ChaCha8Rng,
}

impl TrainState {
    /// Fresh state for `views`; the cloud is seeded uniformly in the init box
    /// with the mean target spectrum.
    pub fn new(config: TrainConfig, views: &[TrainView]) -> Result<Self> {
        config.validate()?;
        let first = views
            .first()
            .ok_or_else(|| Error::InvalidArgument("training needs at least one view".into()))?;
        let wavelengths = first.target.wavelengths().to_vec();
        let n = wavelengths.len();
        let mut mean = vec![0.0; n];
        let mut count = 0usize;
        for v in views {
            if v.target.wavelengths() != wavelengths.as_slice() {
                return Err(Error::Shape(format!("view {} has different wavelengths", v.id)));
            }
            for px in 0..v.target.pixels() {
                for (m, x) in mean.iter_mut().zip(v.target.spectrum_at(px)) {
                    *m += x;
                }
                count += 1;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let cams: Vec<CameraView> = views.iter().map(|v| v.camera.clone()).collect();
        let cloud = init_cloud(
            None,
            Bounds::cube(config.init_bounds),
            config.init_count,
            &wavelengths,
            &mean,
            &mut rng_for(config.seed, "trainer.init"),
        )?;
        let encoder = EncoderParams::new(
            config.encoder_frequencies,
            &config.encoder_hidden,
            &mut rng_for(config.seed, "trainer.encoder"),
        );
        let denoiser = DenoiserNet::new(n, config.denoiser, &mut rng_for(config.seed, "trainer.denoiser"))?;
        Self::assemble(config, cloud, encoder, denoiser, scene_extent(&cams))
    }

    fn assemble(
        config: TrainConfig,
        cloud: GaussianCloud,
        encoder: EncoderParams,
        denoiser: DenoiserNet,
        extent: f64,
    ) -> Result<Self> {
        let schedule = make_schedule(config.diffusion_steps, config.beta_start, config.beta_end)?;
        let range = WavelengthRange::of(cloud.wavelengths())?;
        let per = Gaussian::param_count(cloud.bands());
        Ok(Self {
            iteration: 0,
            moments_cloud: Moments::zeros(cloud.len() * per),
            moments_encoder: Moments::zeros(encoder.params.len()),
            moments_denoiser: Moments::zeros(denoiser.param_count()),
            stats: DensifyStats::new(cloud.len()),
            rng_diffusion: rng_for(config.seed, "trainer.diffusion"),
            rng_densify: rng_for(config.seed, "trainer.densify"),
            config,
            cloud,
            encoder,
            denoiser,
            schedule,
            range,
            scene_extent: extent,
        })
    }

    /// Per-band SH offsets from the encoder, or zeros when it is disabled.
    pub fn offsets(&self) -> Result<Vec<f64>> {
        if !self.config.use_encoder {
            return Ok(vec![0.0; self.cloud.bands() * SH_COEFFS]);
        }
        Ok(offsets_for(&self.encoder, self.cloud.wavelengths(), self.range)?.values)
    }

    pub fn render_view(&self, cam: &CameraView) -> Result<HyperCube> {
        Ok(render(&self.cloud, cam, &self.offsets()?)?.cube)
    }

    /// SH coefficients per band that receive gradients at this step.
    pub fn active_sh_coeffs(&self) -> usize {
        let interval = self.config.sh_degree_interval;
        let degree = if interval == 0 { SH_DEGREE } else { (self.iteration / interval).min(SH_DEGREE) };
        (degree + 1) * (degree + 1)
    }

    fn progress(&self) -> f64 {
        (self.iteration as f64 / self.config.iterations as f64).min(1.0)
    }

    fn means_lr(&self) -> f64 {
        self.config.lr_means * self.config.lr_means_final_ratio.powf(self.progress())
    }

    /// Decay factor for every group other than means and the denoiser.
    fn lr_factor(&self) -> f64 {
        self.config.lr_final_ratio.powf(self.progress())
    }

    /// Index of the view used at `iteration` (seeded shuffle per epoch).
    pub fn view_index(seed: u64, iteration: usize, count: usize) -> usize {
        let epoch = iteration / count;
        let mut order: Vec<usize> = (0..count).collect();
        order.shuffle(&mut rng_for(derive_seed(seed, "trainer.views"), &epoch.to_string()));
        order[iteration % count]
    }

    /// Diffusion branch on a random crop: returns the loss, the optional
    /// routed L1/SSIM values, the denoiser gradient and the weighted
    /// conditioning gradient scattered to the full render.
    fn diffusion_pass(
        &mut self,
        pred: &HyperCube,
        target: &HyperCube,
        w: &LossWeights,
    ) -> Result<(f64, Option<(f64, f64)>, Vec<f64>, HyperCube)> {
        let (h, wd) = (pred.height(), pred.width());
        let size = self.config.diffusion_crop.min(h).min(wd);
        let rng = &mut self.rng_diffusion;
        let r0 = rng.gen_range(0..=h - size);
        let c0 = rng.gen_range(0..=wd - size);
        let t = rng.gen_range(1..=self.schedule.steps());
        let gt_c = crop(target, r0, c0, size, size)?;
        let pred_c = crop(pred, r0, c0, size, size)?;
        let eps = sample_noise(&gt_c, rng);
        let x_t = forward_noise(&gt_c, t, &eps, &self.schedule)?;
        let x_t_t = cube_to_tensor(&x_t);
        let (eps_hat, cache) = self.denoiser.forward(&x_t_t, &cube_to_tensor(&pred_c), t, &self.schedule)?;
        let eps_t = cube_to_tensor(&eps);
        let m = eps_hat.data.len() as f64;
        let mut loss = 0.0;
        let mut d_out = Tensor::zeros(eps_hat.c, eps_hat.h, eps_hat.w);
        for ((d, p), e) in d_out.data.iter_mut().zip(&eps_hat.data).zip(&eps_t.data) {
            let r = p - e;
            loss += r * r;
            *d = w.diffusion * 2.0 * r / m;
        }
        loss /= m;
        let mut routed = None;
        if self.config.route_denoised {
            let ab = self.schedule.alpha_bar(t);
            let k = (1.0 - ab).sqrt() / ab.sqrt();
            let mut x0 = x_t_t.clone();
            for (x, e) in x0.data.iter_mut().zip(&eps_hat.data) {
                *x = *x / ab.sqrt() - k * e;
            }
            let x0 = tensor_to_cube(&x0, pred.wavelengths())?;
            let (l1, g1) = l1_loss(&x0, &gt_c)?;
            let mut dx0 = g1.map(|v| w.l1 * v)?;
            let mut ssim = 1.0;
            if size >= SSIM_WINDOW {
                let (ls, gs) = ssim_loss(&x0, &gt_c)?;
                ssim = 1.0 - ls;
                dx0 = dx0.with_data(dx0.data().iter().zip(gs.data()).map(|(a, b)| a + w.ssim * b).collect())?;
            }
            let dx0 = cube_to_tensor(&dx0);
            for (d, g) in d_out.data.iter_mut().zip(&dx0.data) {
                *d -= k * g;
            }
            routed = Some((l1, ssim));
        }
        let (grad_params, _, d_cond) = self.denoiser.backward(&cache, &d_out);
        let n = pred.bands();
        let mut full = vec![0.0; pred.len()];
        let plane = size * size;
        for b in 0..n {
            for r in 0..size {
                for c in 0..size {
                    full[((r0 + r) * wd + c0 + c) * n + b] = d_cond.data[b * plane + r * size + c];
                }
            }
        }
        Ok((loss, routed, grad_params, pred.with_data(full)?))
    }

    /// One optimization step on one view.
    pub fn train_step(&mut self, view: &TrainView) -> Result<LossReport> {
        let cfg = self.config.clone();
        let step = self.iteration;
        let weights = cfg.effective_weights();
        let offsets = self.offsets()?;
        let rendered = render(&self.cloud, &view.camera, &offsets)?;
        let pred = &rendered.cube;
        let target = &view.target;

        let route = cfg.use_diffusion && cfg.route_denoised;
        let raw_weights = LossWeights {
            diffusion: 0.0,
            l1: if route { 0.0 } else { weights.l1 },
            ssim: if route { 0.0 } else { weights.ssim },
            ..weights
        };
        let (mut report, mut d_pred) = if raw_weights.l1 == 0.0 && raw_weights.ssim == 0.0 && raw_weights.spectral == 0.0 {
            let (r, _) = total_loss(pred, target, None, &LossWeights { l1: 1.0, ..raw_weights })?;
            (r, pred.map(|_| 0.0)?)
        } else {
            total_loss(pred, target, None, &raw_weights)?
        };
        let mut denoiser_grad = None;
        if cfg.use_diffusion {
            let (loss, routed, g, d_cond) = self.diffusion_pass(pred, target, &weights)?;
            report.diffusion = loss;
            if let Some((l1, ssim)) = routed {
                report.l1 = l1;
                report.ssim = ssim;
            }
            d_pred = d_pred.with_data(d_pred.data().iter().zip(d_cond.data()).map(|(a, b)| a + b).collect())?;
            denoiser_grad = Some(g);
        }
        report.total = report.weighted_total(&weights);
        if let Some(component) = report.non_finite_component() {
            error!("non-finite loss at step {step}: {report:?}");
            return Err(Error::NonFiniteLoss {
                component: component.to_string(),
                step,
            });
        }

        let mut grads = render_backward(&self.cloud, &view.camera, &offsets, &d_pred)?;
        let active = self.active_sh_coeffs();
        if active < SH_COEFFS {
            for g in grads.gaussians.iter_mut() {
                for band in g.d_sh.chunks_exact_mut(SH_COEFFS) {
                    band[active..].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            for band in grads.d_offsets.chunks_exact_mut(SH_COEFFS) {
                band[active..].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        if step < cfg.densify_stop() {
            accumulate_screen_gradients(&rendered, &grads, &mut self.stats)?;
        }
        let adam_t = step as u64 + 1;

        let per = Gaussian::param_count(self.cloud.bands());
        let mut flat: Vec<f64> = self.cloud.gaussians.iter().flat_map(flatten_gaussian).collect();
        let g_flat: Vec<f64> = grads.gaussians.iter().flat_map(|g| g.flatten()).collect();
        let lr_means = self.means_lr();
        let k = self.lr_factor();
        adam_step(&mut flat, &g_flat, &mut self.moments_cloud, adam_t, |i| {
            let j = i % per;
            match j {
                0..=2 => (lr_means, MEANS_EPS),
                3..=6 => (k * cfg.lr_rotation, DEFAULT_EPS),
                7..=9 => (k * cfg.lr_scale, DEFAULT_EPS),
                10 => (k * cfg.lr_opacity, DEFAULT_EPS),
                _ if (j - 11) % SH_COEFFS == 0 => (k * cfg.lr_sh, DEFAULT_EPS),
                _ => (k * cfg.lr_sh * cfg.sh_rest_ratio, DEFAULT_EPS),
            }
        });
        for (g, chunk) in self.cloud.gaussians.iter_mut().zip(flat.chunks_exact(per)) {
            *g = unflatten_gaussian(chunk);
            g.normalize_rotation();
        }

        if cfg.use_encoder {
            let g = encoder_backward(&self.encoder, self.cloud.wavelengths(), self.range, &grads.d_offsets)?;
            adam_step(&mut self.encoder.params, &g, &mut self.moments_encoder, adam_t, |_| {
                (k * cfg.lr_encoder, DEFAULT_EPS)
            });
        }
        if let Some(g) = denoiser_grad {
            adam_step(self.denoiser.params_mut(), &g, &mut self.moments_denoiser, adam_t, |_| {
                (cfg.lr_denoiser, DEFAULT_EPS)
            });
        }

        self.iteration += 1;
        let it = self.iteration;
        if it >= cfg.densify_start && it <= cfg.densify_stop() && it % cfg.densify_interval == 0 {
            let s = self.densify_and_prune();
            debug!("step {it}: densify {s:?}, {} gaussians", self.cloud.len());
        }
        Ok(report)
    }

    /// Clone small / split large Gaussians with high screen gradients, then
    /// prune transparent or oversized ones. Statistics are reset.
    pub fn densify_and_prune(&mut self) -> DensifySummary {
        let cfg = &self.config;
        let per = Gaussian::param_count(self.cloud.bands());
        let split_thr = cfg.split_scale_fraction * self.scene_extent;
        let n = self.cloud.len();
        let mut summary = DensifySummary::default();
        let mut keep = vec![true; n];
        let mut born: Vec<Gaussian> = Vec::new();
        let mut budget = cfg.max_gaussians.saturating_sub(n);
        for i in 0..n {
            if self.stats.mean_grad(i) <= cfg.densify_grad_threshold || budget == 0 {
                continue;
            }
            let g = &self.cloud.gaussians[i];
            let s = g.scale();
            if s.max() <= split_thr {
                born.push(g.clone());
                summary.cloned += 1;
                budget -= 1;
            } else {
                let rot = quat_to_matrix(&g.rotation);
                for _ in 0..2 {
                    let z = Vector3::from_fn(|k, _| s[k] * self.rng_densify.sample::<f64, _>(StandardNormal));
                    let mut child = g.clone();
                    child.mean += rot * z;
                    child.log_scale -= Vector3::repeat(SPLIT_SCALE_DIVISOR.ln());
                    born.push(child);
                }
                keep[i] = false;
                summary.split += 1;
                budget = budget.saturating_sub(1);
            }
        }
        let mut candidates: Vec<(Gaussian, Option<usize>)> = self
            .cloud
            .gaussians
            .iter()
            .enumerate()
            .filter(|(i, _)| keep[*i])
            .map(|(i, g)| (g.clone(), Some(i)))
            .collect();
        candidates.extend(born.into_iter().map(|g| (g, None)));
        let extent = self.scene_extent;
        let survives = |g: &Gaussian| g.opacity() >= cfg.prune_opacity && g.scale().max() <= extent;
        let total = candidates.len();
        let mut next: Vec<(Gaussian, Option<usize>)> = Vec::with_capacity(total);
        let mut best: Option<(Gaussian, Option<usize>)> = None;
        for c in candidates {
            if survives(&c.0) {
                next.push(c);
            } else if best.as_ref().map_or(true, |b| c.0.opacity() > b.0.opacity()) {
                best = Some(c);
            }
        }
        if next.is_empty() {
            next.push(best.expect("cloud is never empty"));
        }
        summary.pruned = total - next.len();
        let mut moments = Moments::zeros(next.len() * per);
        for (k, (_, src)) in next.iter().enumerate() {
            if let Some(i) = src {
                moments.m[k * per..(k + 1) * per].copy_from_slice(&self.moments_cloud.m[i * per..(i + 1) * per]);
                moments.v[k * per..(k + 1) * per].copy_from_slice(&self.moments_cloud.v[i * per..(i + 1) * per]);
            }
        }
        self.cloud.gaussians = next.into_iter().map(|(g, _)| g).collect();
        self.moments_cloud = moments;
        self.stats.reset(self.cloud.len());
        summary
    }

    /// Runs until `self.iteration == until`, calling `on_step` after every step.
    pub fn train(
        &mut self,
        views: &[TrainView],
        until: usize,
        mut on_step: impl FnMut(&TrainState, &LossReport) -> Result<()>,
    ) -> Result<()> {
        if views.is_empty() {
            return Err(Error::InvalidArgument("no training views".into()));
        }
        while self.iteration < until {
            let v = &views[Self::view_index(self.config.seed, self.iteration, views.len())];
            let report = self.train_step(v)?;
            on_step(self, &report)?;
        }
        Ok(())
    }

    /// Raw and (optionally) denoised metrics on held-out views. Denoising
    /// uses a per-view generator derived from the seed, so evaluation never
    /// perturbs training.
    pub fn evaluate(&self, views: &[(usize, &CameraView, &HyperCube)], with_denoise: bool) -> Result<EvalReport> {
        if views.is_empty() {
            return Err(Error::InvalidArgument("evaluation needs at least one view".into()));
        }
        let mut out = Vec::with_capacity(views.len());
        for &(id, cam, gt) in views {
            let raw = self.render_view(cam)?;
            let raw_m = MetricTable::compute(&raw, gt)?;
            let den = if with_denoise {
                let d = self.denoise(&raw, id)?;
                Some(MetricTable::compute(&d, gt)?)
            } else {
                None
            };
            out.push(ViewMetrics {
                id,
                raw: raw_m,
                denoised: den,
            });
        }
        let raw: Vec<MetricTable> = out.iter().map(|v| v.raw).collect();
        let den: Vec<MetricTable> = out.iter().filter_map(|v| v.denoised).collect();
        Ok(EvalReport {
            mean_raw: MetricTable::mean(&raw).unwrap(),
            mean_denoised: MetricTable::mean(&den),
            views: out,
        })
    }

    /// Diffusion refinement of a render, seeded by `tag`.
    pub fn denoise(&self, render: &HyperCube, tag: usize) -> Result<HyperCube> {
        let mut rng = rng_for(self.config.seed, &format!("eval.denoise.{tag}"));
        denoise_from(
            &self.denoiser,
            render,
            &self.schedule,
            &mut rng,
            self.config.denoise_steps,
            self.config.denoise_start,
        )
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))?;
        info!("checkpoint at step {} -> {}", self.iteration, path.display());
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes)
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut w = SectionWriter::new();
        w.section(b"CFG ", self.config.to_kv_text().as_bytes());
        let mut misc = Vec::new();
        misc.extend_from_slice(&(self.iteration as u64).to_le_bytes());
        misc.extend_from_slice(&self.scene_extent.to_le_bytes());
        w.section(b"ITER", &misc);
        w.section(b"GSC1", &self.cloud.to_gsc_bytes());
        w.section(b"GSCX", &self.cloud.to_exact_bytes());
        let mut enc = Vec::new();
        put_u32(&mut enc, self.encoder.num_frequencies as u32);
        put_u32(&mut enc, self.encoder.hidden_sizes.len() as u32);
        for &h in &self.encoder.hidden_sizes {
            put_u32(&mut enc, h as u32);
        }
        put_f64s(&mut enc, &self.encoder.params);
        w.section(b"ENC ", &enc);
        let mut den = Vec::new();
        let dc = self.denoiser.config();
        for v in [self.denoiser.bands(), dc.width, dc.groups, dc.time_dim] {
            put_u32(&mut den, v as u32);
        }
        put_f64s(&mut den, &[dc.prior_std.unwrap_or(-1.0)]);
        put_f64s(&mut den, self.denoiser.params());
        w.section(b"DEN ", &den);
        let mut adam = Vec::new();
        for m in [&self.moments_cloud, &self.moments_encoder, &self.moments_denoiser] {
            put_f64s(&mut adam, &m.m);
            put_f64s(&mut adam, &m.v);
        }
        w.section(b"ADAM", &adam);
        let mut st = Vec::new();
        put_f64s(&mut st, &self.stats.grad_sum);
        put_u32(&mut st, self.stats.visible_count.len() as u32);
        for &c in &self.stats.visible_count {
            put_u32(&mut st, c);
        }
        w.section(b"STAT", &st);
        let mut rng = RngState::capture(&self.rng_diffusion).to_bytes();
        rng.extend(RngState::capture(&self.rng_densify).to_bytes());
        w.section(b"RNG ", &rng);
        w.finish()
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let sections = read_sections(bytes)?;
        let get = |tag: &[u8; 4]| {
            sections
                .iter()
                .find(|(t, _)| t == tag)
                .map(|(_, b)| *b)
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks section {}", String::from_utf8_lossy(tag))))
        };
        let cfg_text = std::str::from_utf8(get(b"CFG ")?)
            .map_err(|_| Error::InvalidArgument("checkpoint config is not UTF-8".into()))?;
        let config = TrainConfig::from_kv_text(cfg_text)?;
        let mut r = Reader::new(get(b"ITER")?);
        let iteration = r.u64()? as usize;
        let extent = r.f64()?;
        r.end()?;
        let cloud = GaussianCloud::from_exact_bytes(get(b"GSCX")?)?;
        let mut r = Reader::new(get(b"ENC ")?);
        let freqs = r.u32()? as usize;
        let nh = r.u32()? as usize;
        let hidden = (0..nh).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let encoder = EncoderParams::from_parts(freqs, hidden, r.f64s()?)?;
        r.end()?;
        let mut r = Reader::new(get(b"DEN ")?);
        let bands = r.u32()? as usize;
        let dcfg = DenoiserConfig {
            width: r.u32()? as usize,
            groups: r.u32()? as usize,
            time_dim: r.u32()? as usize,
            prior_std: match r.f64s()?[..] {
                [s] if s >= 0.0 => Some(s),
                [_] => None,
                _ => return Err(Error::Shape("denoiser section has a malformed prior std".into())),
            },
        };
        let denoiser = DenoiserNet::from_parts(bands, dcfg, r.f64s()?)?;
        r.end()?;
        let mut state = Self::assemble(config, cloud, encoder, denoiser, extent)?;
        state.iteration = iteration;
        let mut r = Reader::new(get(b"ADAM")?);
        for m in [&mut state.moments_cloud, &mut state.moments_encoder, &mut state.moments_denoiser] {
            let (mm, vv) = (r.f64s()?, r.f64s()?);
            if mm.len() != m.len() || vv.len() != m.len() {
                return Err(Error::Shape("optimizer moments do not match parameters".into()));
            }
            m.m = mm;
            m.v = vv;
        }
        r.end()?;
        let mut r = Reader::new(get(b"STAT")?);
        let grad_sum = r.f64s()?;
        let nc = r.u32()? as usize;
        let visible_count = (0..nc).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        r.end()?;
        if grad_sum.len() != state.cloud.len() || visible_count.len() != state.cloud.len() {
            return Err(Error::Shape("densify statistics do not match the cloud".into()));
        }
        state.stats = DensifyStats {
            grad_sum,
            visible_count,
        };
        let rb = get(b"RNG ")?;
        let half = rb.len() / 2;
        let bad_rng = || Error::InvalidArgument("corrupt rng state".into());
        state.rng_diffusion = RngState::from_bytes(&rb[..half]).ok_or_else(bad_rng)?.restore();
        state.rng_densify = RngState::from_bytes(&rb[half..]).ok_or_else(bad_rng)?.restore();
        Ok(state)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.extend_from_slice(&(v.len() as u64).to_le_bytes());
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct SectionWriter {
    buf: Vec<u8>,
}

impl SectionWriter {
    fn new() -> Self {
        let mut buf = CHECKPOINT_MAGIC.to_vec();
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        Self { buf }
    }

    fn section(&mut self, tag: &[u8; 4], payload: &[u8]) {
        self.buf.extend_from_slice(tag);
        self.buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(payload);
    }

    fn finish(self) -> Vec<u8> {
        self.buf
    }
}

fn read_sections(bytes: &[u8]) -> Result<Vec<([u8; 4], &[u8])>> {
    let mut r = Reader::new(bytes);
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::InvalidArgument(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Vec::new();
    while !r.is_empty() {
        let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
        let len = r.u64()? as usize;
        out.push((tag, r.take(len)?));
    }
    Ok(out)
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(b: &'a [u8]) -> Self {
        Self { b, pos: 0 }
    }

    fn is_empty(&self) -> bool {
        self.pos >= self.b.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.pos < n {
            return Err(Error::Truncated {
                expected: self.pos + n,
                found: self.b.len(),
            });
        }
        let s = &self.b[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        if n > (self.b.len() - self.pos) / 8 {
            return Err(Error::Truncated {
                expected: self.pos + 8 * n,
                found: self.b.len(),
            });
        }
        (0..n).map(|_| self.f64()).collect()
    }

    fn end(&self) -> Result<()> {
        if self.pos != self.b.len() {
            return Err(Error::TrailingBytes {
                expected: self.pos,
                found: self.b.len(),
            });
        }
        Ok(())
    }
}
