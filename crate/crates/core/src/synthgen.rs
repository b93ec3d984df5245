//! Synthetic multi-view hyperspectral scenes rendered with the crate's own
//! rasterizer, plus dataset I/O and the train/test split.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypercube::{read_cube, write_cube, HyperCube};
use crate::rasterizer::render;
use crate::rng::rng_for;
use crate::scene::{logit, CameraView, Gaussian, GaussianCloud};
use crate::sh::{SH_C0, SH_COEFFS};

pub const POSES_FILE: &str = "poses.json";
pub const CLOUD_FILE: &str = "true_cloud.gsc";

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub materials: usize,
    pub gaussians: usize,
    pub bands: usize,
    pub wavelength_min: f64,
    pub wavelength_max: f64,
    pub views: usize,
    pub image_size: usize,
    pub orbit_radius: f64,
    /// Degrees above the horizon.
    pub elevation: f64,
    /// Noise std at the spectrum centre.
    pub noise_std: f64,
    /// Edge bands get `noise_std * (1 + edge_gain)`, quadratic in between.
    pub noise_edge_gain: f64,
    /// Per-view multiplicative gain in `1 ± gain_jitter` (breaks realizability).
    pub gain_jitter: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            materials: 6,
            gaussians: 64,
            bands: 8,
            wavelength_min: 400.0,
            wavelength_max: 1100.0,
            views: 24,
            image_size: 64,
            orbit_radius: 3.0,
            elevation: 20.0,
            noise_std: 0.0,
            noise_edge_gain: 2.0,
            gain_jitter: 0.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("cannot parse value `{v}` for key `{key}`")))
        }
        match key {
            "materials" => self.materials = p(key, v)?,
            "gaussians" => self.gaussians = p(key, v)?,
            "bands" => self.bands = p(key, v)?,
            "wavelength_min" => self.wavelength_min = p(key, v)?,
            "wavelength_max" => self.wavelength_max = p(key, v)?,
            "views" => self.views = p(key, v)?,
            "image_size" => self.image_size = p(key, v)?,
            "orbit_radius" => self.orbit_radius = p(key, v)?,
            "elevation" => self.elevation = p(key, v)?,
            "noise_std" => self.noise_std = p(key, v)?,
            "noise_edge_gain" => self.noise_edge_gain = p(key, v)?,
            "gain_jitter" => self.gain_jitter = p(key, v)?,
            "seed" => self.seed = p(key, v)?,
            _ => return Err(Error::Config(format!("unknown scene key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.bands < 3 {
            return bad(format!("need at least 3 bands, got {}", self.bands));
        }
        if self.views < 2 {
            return bad(format!("need at least 2 views, got {}", self.views));
        }
        if self.gaussians == 0 || self.materials == 0 || self.image_size == 0 {
            return bad("gaussian count, material count and image size must be positive".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_edge_gain >= 0.0 && self.gain_jitter >= 0.0) {
            return bad("noise parameters must be non-negative".into());
        }
        if !(self.wavelength_min > 0.0 && self.wavelength_max > self.wavelength_min) {
            return bad("wavelength range must be positive and increasing".into());
        }
        if !(self.orbit_radius > 1.5) {
            return bad(format!("orbit radius {} too small for the unit scene", self.orbit_radius));
        }
        Ok(())
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        let n = self.bands;
        (0..n)
            .map(|b| self.wavelength_min + (self.wavelength_max - self.wavelength_min) * b as f64 / (n - 1) as f64)
            .collect()
    }

    /// Per-band noise std.
    pub fn noise_profile(&self) -> Vec<f64> {
        let n = self.bands;
        (0..n)
            .map(|b| {
                let d = 2.0 * b as f64 / (n - 1) as f64 - 1.0;
                self.noise_std * (1.0 + self.noise_edge_gain * d * d)
            })
            .collect()
    }
}

/// Smooth reflectance-like spectrum: a baseline plus 2-4 Gaussian bumps.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialSpectrum {
    pub baseline: f64,
    /// `(amplitude, centre nm, width nm)`
    pub bumps: Vec<(f64, f64, f64)>,
}

impl MaterialSpectrum {
    pub fn random(rng: &mut impl Rng, lo: f64, hi: f64) -> Self {
        let k = rng.gen_range(2..=4);
        Self {
            baseline: rng.gen_range(0.03..0.12),
            bumps: (0..k)
                .map(|_| {
                    (
                        rng.gen_range(0.1..0.35),
                        rng.gen_range(lo..hi),
                        rng.gen_range(0.08..0.3) * (hi - lo),
                    )
                })
                .collect(),
        }
    }

    pub fn eval(&self, lambda: f64) -> f64 {
        let v = self.baseline
            + self
                .bumps
                .iter()
                .map(|(a, c, w)| a * (-0.5 * ((lambda - c) / w).powi(2)).exp())
                .sum::<f64>();
        v.min(0.95)
    }
}

/// Hidden ground-truth cloud and camera orbit for a spec.
pub fn build_scene(spec: &SceneSpec) -> Result<(GaussianCloud, Vec<CameraView>)> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, "synthgen.scene");
    let wl = spec.wavelengths();
    let materials: Vec<MaterialSpectrum> = (0..spec.materials)
        .map(|_| MaterialSpectrum::random(&mut rng, spec.wavelength_min, spec.wavelength_max))
        .collect();
    let gaussians = (0..spec.gaussians)
        .map(|_| {
            let mat = &materials[rng.gen_range(0..materials.len())];
            // uniform in a ball of radius 0.7
            let mean = loop {
                let p = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                if p.norm() <= 1.0 {
                    break p * 0.7;
                }
            };
            let mut sh = vec![0.0; spec.bands * SH_COEFFS];
            let tilt: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.04..0.04));
            for (b, &l) in wl.iter().enumerate() {
                sh[b * SH_COEFFS] = (mat.eval(l) - 0.5) / SH_C0;
                for k in 0..3 {
                    sh[b * SH_COEFFS + 1 + k] = tilt[k];
                }
            }
            let q: [f64; 4] = std::array::from_fn(|_| rng.sample::<f64, _>(StandardNormal));
            let mut g = Gaussian {
                mean,
                rotation: q,
                log_scale: Vector3::from_fn(|_, _| rng.gen_range(0.1f64..0.28).ln()),
                opacity_logit: logit(rng.gen_range(0.6..0.95)),
                sh,
            };
            g.normalize_rotation();
            g
        })
        .collect();
    let cloud = GaussianCloud::new(gaussians, wl)?;
    let focal = spec.image_size as f64 * 1.6;
    let cams = (0..spec.views)
        .map(|i| {
            let az = std::f64::consts::TAU * i as f64 / spec.views as f64;
            let el = if i % 2 == 0 { spec.elevation } else { -0.5 * spec.elevation }.to_radians();
            let eye = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * spec.orbit_radius;
            CameraView::look_at(eye, Vector3::zeros(), Vector3::z(), focal, spec.image_size, spec.image_size)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((cloud, cams))
}

/// One entry of the pose file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub id: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub world_to_camera: [f64; 12],
}

impl PoseRecord {
    pub fn from_camera(id: usize, c: &CameraView) -> Self {
        Self {
            id,
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            world_to_camera: c.world_to_camera_rows(),
        }
    }

    pub fn camera(&self) -> Result<CameraView> {
        CameraView::from_world_to_camera_rows(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            &self.world_to_camera,
        )
    }
}

pub fn write_poses(poses: &[PoseRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(poses)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<PoseRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn clean_name(id: usize) -> String {
    format!("view_{id:04}.hsc")
}

pub fn noisy_name(id: usize) -> String {
    format!("view_{id:04}_noisy.hsc")
}

/// Clean and noisy targets for every view of a spec, in view order.
pub fn synthesize(spec: &SceneSpec) -> Result<(GaussianCloud, Vec<CameraView>, Vec<HyperCube>, Vec<HyperCube>)> {
    let (cloud, cams) = build_scene(spec)?;
    let offsets = vec![0.0; cloud.bands() * SH_COEFFS];
    let profile = spec.noise_profile();
    let pairs = cams
        .par_iter()
        .enumerate()
        .map(|(i, cam)| {
            let mut clean = render(&cloud, cam, &offsets)?.cube;
            if spec.gain_jitter > 0.0 {
                let gain = 1.0 + rng_for(spec.seed, &format!("synthgen.gain.{i}")).gen_range(-1.0..=1.0) * spec.gain_jitter;
                clean = clean.map(|v| v * gain)?;
            }
            let mut rng = rng_for(spec.seed, &format!("synthgen.noise.{i}"));
            let n = clean.bands();
            let noisy: Vec<f64> = clean
                .data()
                .iter()
                .enumerate()
                .map(|(j, v)| v + profile[j % n] * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let noisy = clean.with_data(noisy)?;
            Ok((clean, noisy))
        })
        .collect::<Result<Vec<_>>>()?;
    let (clean, noisy) = pairs.into_iter().unzip();
    Ok((cloud, cams, clean, noisy))
}

/// Writes the full dataset into `out_dir`.
pub fn generate(spec: &SceneSpec, out_dir: impl AsRef<Path>) -> Result<()> {
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (cloud, cams, clean, noisy) = synthesize(spec)?;
    for (i, (c, n)) in clean.iter().zip(&noisy).enumerate() {
        write_cube(c, out.join(clean_name(i)))?;
        write_cube(n, out.join(noisy_name(i)))?;
    }
    let poses: Vec<PoseRecord> = cams.iter().enumerate().map(|(i, c)| PoseRecord::from_camera(i, c)).collect();
    write_poses(&poses, out.join(POSES_FILE))?;
    cloud.write(out.join(CLOUD_FILE))
}

/// A loaded view: pose plus clean and noisy targets.
#[derive(Clone, Debug)]
pub struct DatasetView {
    pub id: usize,
    pub camera: CameraView,
    pub clean: HyperCube,
    pub noisy: HyperCube,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub views: Vec<DatasetView>,
}

impl Dataset {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let root = dir.as_ref().to_path_buf();
        let poses = read_poses(root.join(POSES_FILE))?;
        let views = poses
            .iter()
            .map(|p| {
                let camera = p.camera()?;
                let clean = read_cube(root.join(clean_name(p.id)))?;
                let noisy_path = root.join(noisy_name(p.id));
                let noisy = if noisy_path.exists() { read_cube(noisy_path)? } else { clean.clone() };
                if clean.height() != p.height || clean.width() != p.width {
                    return Err(Error::Shape(format!(
                        "view {} is {}x{} but its pose says {}x{}",
                        p.id,
                        clean.height(),
                        clean.width(),
                        p.height,
                        p.width
                    )));
                }
                Ok(DatasetView {
                    id: p.id,
                    camera,
                    clean,
                    noisy,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if views.is_empty() {
            return Err(Error::InvalidArgument(format!("no views in {}", root.display())));
        }
        Ok(Self { root, views })
    }

    pub fn from_parts(cams: Vec<CameraView>, clean: Vec<HyperCube>, noisy: Vec<HyperCube>) -> Self {
        let views = cams
            .into_iter()
            .zip(clean.into_iter().zip(noisy))
            .enumerate()
            .map(|(id, (camera, (clean, noisy)))| DatasetView {
                id,
                camera,
                clean,
                noisy,
            })
            .collect();
        Self {
            root: PathBuf::new(),
            views,
        }
    }

    pub fn wavelengths(&self) -> &[f64] {
        self.views[0].clean.wavelengths()
    }
}

/// Seeded shuffle of `0..count` split into `(train, test)` with
/// `round(train_fraction * count)` training views, keeping both sides
/// non-empty. Each side is returned sorted.
pub fn split(count: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if count < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 views to split, got {count}")));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let n_train = ((train_fraction * count as f64).round() as usize).clamp(1, count - 1);
    let mut ids: Vec<usize> = (0..count).collect();
    ids.shuffle(&mut rng_for(seed, "synthgen.split"));
    let mut train = ids[..n_train].to_vec();
    let mut test = ids[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}
