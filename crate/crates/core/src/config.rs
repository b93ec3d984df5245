//! Flat `key = value` training configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::diffusion::{ChainStart, DenoiserConfig};
use crate::error::{Error, Result};
use crate::losses::LossWeights;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,

    pub lr_means: f64,
    /// Means decay exponentially to `lr_means * lr_means_final_ratio`.
    pub lr_means_final_ratio: f64,
    /// Rotation, scale, opacity, SH and encoder rates decay exponentially to
    /// this fraction of their initial value; 1 keeps them constant.
    pub lr_final_ratio: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    /// DC coefficients.
    pub lr_sh: f64,
    /// Ratio of the DC learning rate used for higher SH orders.
    pub sh_rest_ratio: f64,
    /// One more SH degree becomes trainable every this many steps; 0
    /// trains all degrees from the start.
    pub sh_degree_interval: usize,
    pub lr_encoder: f64,
    pub lr_denoiser: f64,

    pub weights: LossWeights,
    pub use_encoder: bool,
    pub use_spectral: bool,
    pub use_diffusion: bool,
    /// Apply L1/SSIM to the one-step clean estimate of the denoiser instead
    /// of the raw render.
    pub route_denoised: bool,

    pub densify_start: usize,
    /// `None` means 60% of `iterations`.
    pub densify_stop: Option<usize>,
    pub densify_interval: usize,
    pub densify_grad_threshold: f64,
    pub prune_opacity: f64,
    /// Fraction of the scene extent separating clone from split.
    pub split_scale_fraction: f64,
    pub max_gaussians: usize,

    pub init_count: usize,
    /// Half-width of the initialization box centred at the origin.
    pub init_bounds: f64,

    pub encoder_frequencies: usize,
    pub encoder_hidden: Vec<usize>,

    pub denoiser: DenoiserConfig,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub diffusion_crop: usize,
    pub denoise_steps: usize,
    pub denoise_start: ChainStart,

    pub train_fraction: f64,
    pub train_on_noisy: bool,
    /// 0 disables periodic evaluation.
    pub eval_interval: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            seed: 0,
            lr_means: 4e-3,
            lr_means_final_ratio: 0.01,
            lr_final_ratio: 0.01,
            lr_rotation: 3e-3,
            lr_scale: 5e-3,
            lr_opacity: 2e-2,
            lr_sh: 1e-2,
            sh_rest_ratio: 0.05,
            sh_degree_interval: 1000,
            lr_encoder: 1e-3,
            lr_denoiser: 1e-4,
            weights: LossWeights::default(),
            use_encoder: true,
            use_spectral: true,
            use_diffusion: true,
            route_denoised: false,
            densify_start: 500,
            densify_stop: None,
            densify_interval: 100,
            densify_grad_threshold: 2e-4,
            prune_opacity: 0.005,
            split_scale_fraction: 0.01,
            max_gaussians: 4096,
            init_count: 256,
            init_bounds: 0.8,
            encoder_frequencies: crate::encoder::DEFAULT_FREQUENCIES,
            encoder_hidden: crate::encoder::DEFAULT_HIDDEN.to_vec(),
            denoiser: DenoiserConfig::default(),
            diffusion_steps: crate::diffusion::DEFAULT_STEPS,
            beta_start: crate::diffusion::DEFAULT_BETA_START,
            beta_end: crate::diffusion::DEFAULT_BETA_END,
            diffusion_crop: 32,
            denoise_steps: 1,
            denoise_start: ChainStart::Render,
            train_fraction: 0.9,
            train_on_noisy: true,
            eval_interval: 0,
            checkpoint_interval: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("cannot parse value `{v}` for key `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("expected a boolean for `{key}`, got `{v}`"))),
    }
}

impl TrainConfig {
    pub fn densify_stop(&self) -> usize {
        self.densify_stop.unwrap_or(self.iterations * 6 / 10)
    }

    /// Weights with the ablation switches applied.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            spectral: if self.use_spectral { self.weights.spectral } else { 0.0 },
            diffusion: if self.use_diffusion { self.weights.diffusion } else { 0.0 },
            ..self.weights
        }
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "iterations" => self.iterations = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "lr_means" => self.lr_means = parse(key, v)?,
            "lr_means_final_ratio" => self.lr_means_final_ratio = parse(key, v)?,
            "lr_rotation" => self.lr_rotation = parse(key, v)?,
            "lr_scale" => self.lr_scale = parse(key, v)?,
            "lr_opacity" => self.lr_opacity = parse(key, v)?,
            "lr_sh" => self.lr_sh = parse(key, v)?,
            "lr_encoder" => self.lr_encoder = parse(key, v)?,
            "lr_denoiser" => self.lr_denoiser = parse(key, v)?,
            "w1" => self.weights.l1 = parse(key, v)?,
            "w2" => self.weights.ssim = parse(key, v)?,
            "w3" => self.weights.spectral = parse(key, v)?,
            "w4" => self.weights.diffusion = parse(key, v)?,
            "alpha" => self.weights.alpha = parse(key, v)?,
            "beta" => self.weights.beta = parse(key, v)?,
            "use_encoder" => self.use_encoder = parse_bool(key, v)?,
            "use_spectral" => self.use_spectral = parse_bool(key, v)?,
            "use_diffusion" => self.use_diffusion = parse_bool(key, v)?,
            "route_denoised" => self.route_denoised = parse_bool(key, v)?,
            "densify_start" => self.densify_start = parse(key, v)?,
            "densify_stop" => {
                self.densify_stop = if v == "auto" { None } else { Some(parse(key, v)?) }
            }
            "densify_interval" => self.densify_interval = parse(key, v)?,
            "densify_grad_threshold" => self.densify_grad_threshold = parse(key, v)?,
            "prune_opacity" => self.prune_opacity = parse(key, v)?,
            "split_scale_fraction" => self.split_scale_fraction = parse(key, v)?,
            "max_gaussians" => self.max_gaussians = parse(key, v)?,
            "init_count" => self.init_count = parse(key, v)?,
            "init_bounds" => self.init_bounds = parse(key, v)?,
            "encoder_frequencies" => self.encoder_frequencies = parse(key, v)?,
            "encoder_hidden" => {
                self.encoder_hidden = if v.trim().is_empty() {
                    Vec::new()
                } else {
                    v.split(',').map(|s| parse(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "denoiser_width" => self.denoiser.width = parse(key, v)?,
            "denoiser_groups" => self.denoiser.groups = parse(key, v)?,
            "denoiser_time_dim" => self.denoiser.time_dim = parse(key, v)?,
            "denoiser_prior_std" => {
                self.denoiser.prior_std = match v {
                    "none" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "diffusion_steps" => self.diffusion_steps = parse(key, v)?,
            "beta_start" => self.beta_start = parse(key, v)?,
            "beta_end" => self.beta_end = parse(key, v)?,
            "diffusion_crop" => self.diffusion_crop = parse(key, v)?,
            "denoise_steps" => self.denoise_steps = parse(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "train_on_noisy" => self.train_on_noisy = parse_bool(key, v)?,
            "sh_rest_ratio" => self.sh_rest_ratio = parse(key, v)?,
            "sh_degree_interval" => self.sh_degree_interval = parse(key, v)?,
            "lr_final_ratio" => self.lr_final_ratio = parse(key, v)?,
            "denoise_start" => {
                self.denoise_start = match v {
                    "noise" => ChainStart::Noise,
                    "render" => ChainStart::Render,
                    _ => return Err(Error::Config(format!("denoise_start must be `noise` or `render`, got `{v}`"))),
                }
            }
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            cfg.apply_override(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_kv_text(&text)
    }

    /// Every key with its effective value; parses back to `self`.
    pub fn to_kv_text(&self) -> String {
        let w = &self.weights;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("iterations", self.iterations.to_string());
        put("seed", self.seed.to_string());
        put("lr_means", format!("{:?}", self.lr_means));
        put("lr_means_final_ratio", format!("{:?}", self.lr_means_final_ratio));
        put("lr_final_ratio", format!("{:?}", self.lr_final_ratio));
        put("lr_rotation", format!("{:?}", self.lr_rotation));
        put("lr_scale", format!("{:?}", self.lr_scale));
        put("lr_opacity", format!("{:?}", self.lr_opacity));
        put("lr_sh", format!("{:?}", self.lr_sh));
        put("sh_rest_ratio", format!("{:?}", self.sh_rest_ratio));
        put("sh_degree_interval", self.sh_degree_interval.to_string());
        put("lr_encoder", format!("{:?}", self.lr_encoder));
        put("lr_denoiser", format!("{:?}", self.lr_denoiser));
        put("w1", format!("{:?}", w.l1));
        put("w2", format!("{:?}", w.ssim));
        put("w3", format!("{:?}", w.spectral));
        put("w4", format!("{:?}", w.diffusion));
        put("alpha", format!("{:?}", w.alpha));
        put("beta", format!("{:?}", w.beta));
        put("use_encoder", self.use_encoder.to_string());
        put("use_spectral", self.use_spectral.to_string());
        put("use_diffusion", self.use_diffusion.to_string());
        put("route_denoised", self.route_denoised.to_string());
        put("densify_start", self.densify_start.to_string());
        put(
            "densify_stop",
            self.densify_stop.map_or_else(|| "auto".to_string(), |v| v.to_string()),
        );
        put("densify_interval", self.densify_interval.to_string());
        put("densify_grad_threshold", format!("{:?}", self.densify_grad_threshold));
        put("prune_opacity", format!("{:?}", self.prune_opacity));
        put("split_scale_fraction", format!("{:?}", self.split_scale_fraction));
        put("max_gaussians", self.max_gaussians.to_string());
        put("init_count", self.init_count.to_string());
        put("init_bounds", format!("{:?}", self.init_bounds));
        put("encoder_frequencies", self.encoder_frequencies.to_string());
        put(
            "encoder_hidden",
            self.encoder_hidden.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
        );
        put("denoiser_width", self.denoiser.width.to_string());
        put("denoiser_groups", self.denoiser.groups.to_string());
        put("denoiser_time_dim", self.denoiser.time_dim.to_string());
        put(
            "denoiser_prior_std",
            self.denoiser.prior_std.map_or("none".to_string(), |s| format!("{s:?}")),
        );
        put("diffusion_steps", self.diffusion_steps.to_string());
        put("beta_start", format!("{:?}", self.beta_start));
        put("beta_end", format!("{:?}", self.beta_end));
        put("diffusion_crop", self.diffusion_crop.to_string());
        put("denoise_steps", self.denoise_steps.to_string());
        put(
            "denoise_start",
            match self.denoise_start {
                ChainStart::Noise => "noise",
                ChainStart::Render => "render",
            }
            .to_string(),
        );
        put("train_fraction", format!("{:?}", self.train_fraction));
        put("train_on_noisy", self.train_on_noisy.to_string());
        put("eval_interval", self.eval_interval.to_string());
        put("checkpoint_interval", self.checkpoint_interval.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        let lrs = [
            self.lr_means,
            self.lr_rotation,
            self.lr_scale,
            self.lr_opacity,
            self.lr_sh,
            self.sh_rest_ratio,
            self.lr_encoder,
            self.lr_denoiser,
        ];
        if lrs.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return bad("learning rates must be finite and non-negative".into());
        }
        if !(self.lr_means_final_ratio > 0.0 && self.lr_means_final_ratio <= 1.0) {
            return bad("lr_means_final_ratio must be in (0, 1]".into());
        }
        if !(self.lr_final_ratio > 0.0 && self.lr_final_ratio <= 1.0) {
            return bad("lr_final_ratio must be in (0, 1]".into());
        }
        self.weights.validate()?;
        if self.densify_interval == 0
            || !(self.densify_grad_threshold > 0.0)
            || !(self.prune_opacity > 0.0)
            || !(self.split_scale_fraction > 0.0)
        {
            return bad("densify interval and thresholds must be positive".into());
        }
        if self.densify_start > self.densify_stop() || self.densify_stop() > self.iterations {
            return bad(format!(
                "densify window [{}, {}] must lie within [0, {}]",
                self.densify_start,
                self.densify_stop(),
                self.iterations
            ));
        }
        if self.init_count == 0 || !(self.init_bounds > 0.0) || self.max_gaussians < self.init_count {
            return bad("init_count and init_bounds must be positive and below max_gaussians".into());
        }
        if self.encoder_frequencies == 0 {
            return bad("encoder_frequencies must be positive".into());
        }
        self.denoiser.validate()?;
        if self.diffusion_crop < 4 {
            return bad("diffusion_crop must be at least 4".into());
        }
        if self.denoise_steps == 0 || self.denoise_steps > self.diffusion_steps {
            return bad(format!(
                "denoise_steps must be in 1..={}",
                self.diffusion_steps
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must be in (0, 1)".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.lr_means = 0.1 + 0.2;
        c.encoder_hidden = vec![8, 3];
        c.densify_stop = Some(77);
        let back = TrainConfig::from_kv_text(&c.to_kv_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_overrides_and_errors() {
        let c = TrainConfig::from_kv_text("# hi\niterations = 10 # trailing\n\nw4=0\n").unwrap();
        assert_eq!(c.iterations, 10);
        assert_eq!(c.weights.diffusion, 0.0);
        assert!(TrainConfig::from_kv_text("nope = 1").is_err());
        assert!(TrainConfig::from_kv_text("iterations = x").is_err());
        assert!(TrainConfig::from_kv_text("iterations").is_err());
        let mut c = TrainConfig::default();
        c.apply_override("use_encoder=off").unwrap();
        assert!(!c.use_encoder);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig {
            densify_start: 5000,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            prune_opacity: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
