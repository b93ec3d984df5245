//! Command-line verbs.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use log::info;

use crate::config::TrainConfig;
use crate::error::Error;
use crate::evalkit::{diff_heatmap, pseudo_rgb, write_metrics_csv, MetricTable};
use crate::gradcheck::check_all;
use crate::hypercube::{read_cube, write_cube, HyperCube};
use crate::losses::LOSS_CSV_HEADER;
use crate::synthgen::{generate, read_poses, split, Dataset, SceneSpec, POSES_FILE};
use crate::trainer::{TrainState, TrainView};

pub const CONFIG_ECHO: &str = "config.txt";
pub const LOSS_CSV: &str = "loss.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const CHECKPOINT: &str = "checkpoint.ddhg";
pub const SCENE_ECHO: &str = "scene.txt";

#[derive(Parser, Debug)]
#[command(name = "ddhgs", version, about = "Hyperspectral Gaussian splatting with a diffusion denoiser")]
pub struct Cli {
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Settings {
    /// Flat `key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` overrides, applied after the file.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Verb {
    /// Generate a synthetic multi-view dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint (its config is used as the base).
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Render one pose from a checkpoint.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        poses: PathBuf,
        /// Pose id inside the poses file.
        #[arg(long)]
        view: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write a pseudo-RGB preview.
        #[arg(long)]
        rgb: Option<PathBuf>,
    },
    /// Refine a rendered cube with the checkpoint's denoiser.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reverse steps (defaults to the checkpoint config).
        #[arg(long)]
        steps: Option<usize>,
        /// Seed tag for the sampler.
        #[arg(long, default_value_t = 0)]
        tag: usize,
    },
    /// Metrics and heatmaps for two cubes, or for a checkpoint on a dataset.
    Eval {
        #[arg(long, requires = "gt", conflicts_with_all = ["checkpoint", "data"])]
        pred: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, requires = "data")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate every view instead of the held-out split.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference checks of every backward pass.
    Gradcheck,
}

/// Configures the rayon pool from `DDHGS_THREADS`.
pub fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DDHGS_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("DDHGS_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            bail!(Error::Config("DDHGS_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// One-line `error kind=<kind> message="<text>"` report.
pub fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or("other", Error::kind);
    let msg = format!("{err:#}").replace('\\', "\\\\").replace('"', "\\\"").replace('\n', " ");
    format!("error kind={kind} message=\"{msg}\"")
}

fn kv_lines(path: &Path) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap().trim().to_string())
        .filter(|l| !l.is_empty())
        .collect())
}

fn split_kv(kv: &str) -> anyhow::Result<(&str, &str)> {
    let (k, v) = kv
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{kv}` is not key=value")))?;
    Ok((k.trim(), v.trim()))
}

pub fn train_config(base: TrainConfig, settings: &Settings) -> anyhow::Result<TrainConfig> {
    let mut cfg = base;
    if let Some(p) = &settings.config {
        for l in kv_lines(p)? {
            cfg.apply_override(&l).with_context(|| format!("in {}", p.display()))?;
        }
    }
    for o in &settings.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn scene_spec(settings: &Settings) -> anyhow::Result<SceneSpec> {
    let mut spec = SceneSpec::default();
    let mut lines = Vec::new();
    if let Some(p) = &settings.config {
        lines = kv_lines(p)?;
    }
    lines.extend(settings.overrides.iter().cloned());
    for l in &lines {
        let (k, v) = split_kv(l)?;
        spec.set(k, v)?;
    }
    spec.validate()?;
    Ok(spec)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Raw and denoised metrics over `ids`, written as CSV.
fn eval_to_csv(state: &TrainState, data: &Dataset, ids: &[usize], path: &Path) -> anyhow::Result<()> {
    let views: Vec<_> = ids
        .iter()
        .map(|&i| (data.views[i].id, &data.views[i].camera, &data.views[i].clean))
        .collect();
    let report = state.evaluate(&views, state.config.use_diffusion)?;
    write_metrics_csv(&report.csv_rows(), path)?;
    info!(
        "step {} eval: raw psnr {:.3} sam {:.4}{}",
        state.iteration,
        report.mean_raw.psnr,
        report.mean_raw.sam,
        report
            .mean_denoised
            .map(|d| format!(", denoised psnr {:.3} sam {:.4}", d.psnr, d.sam))
            .unwrap_or_default()
    );
    Ok(())
}

pub fn train(data_dir: &Path, out: &Path, resume: Option<&Path>, settings: &Settings) -> anyhow::Result<()> {
    let resumed = resume.map(TrainState::load_checkpoint).transpose()?;
    let base = resumed.as_ref().map_or_else(TrainConfig::default, |s| s.config.clone());
    let cfg = train_config(base, settings)?;
    let data = Dataset::load(data_dir)?;
    create_dir(out)?;
    write_text(&out.join(CONFIG_ECHO), &cfg.to_kv_text())?;
    print!("{}", cfg.to_kv_text());

    let (train_ids, test_ids) = split(data.views.len(), cfg.train_fraction, cfg.seed)?;
    let views: Vec<TrainView> = train_ids
        .iter()
        .map(|&i| {
            let v = &data.views[i];
            TrainView::new(v.id, v.camera.clone(), if cfg.train_on_noisy { &v.noisy } else { &v.clean })
        })
        .collect();
    let mut state = match resumed {
        Some(mut s) => {
            s.config = cfg.clone();
            s
        }
        None => TrainState::new(cfg.clone(), &views)?,
    };

    let loss_path = out.join(LOSS_CSV);
    let mut loss_csv = if state.iteration == 0 {
        let mut f = BufWriter::new(File::create(&loss_path).map_err(|e| Error::io(&loss_path, e))?);
        writeln!(f, "{LOSS_CSV_HEADER}")?;
        f
    } else {
        BufWriter::new(
            OpenOptions::new()
                .append(true)
                .create(true)
                .open(&loss_path)
                .map_err(|e| Error::io(&loss_path, e))?,
        )
    };
    info!(
        "training {} views ({} held out) from step {} to {}",
        views.len(),
        test_ids.len(),
        state.iteration,
        cfg.iterations
    );
    state.train(&views, cfg.iterations, |s, r| {
        writeln!(loss_csv, "{}", r.csv_line(s.iteration - 1)).map_err(|e| Error::io(&loss_path, e))?;
        if cfg.checkpoint_interval > 0 && s.iteration % cfg.checkpoint_interval == 0 && s.iteration < cfg.iterations {
            s.save_checkpoint(out.join(format!("checkpoint_{:06}.ddhg", s.iteration)))?;
        }
        if cfg.eval_interval > 0 && s.iteration % cfg.eval_interval == 0 && s.iteration < cfg.iterations {
            let p = out.join(format!("metrics_{:06}.csv", s.iteration));
            eval_to_csv(s, &data, &test_ids, &p).map_err(|e| Error::InvalidArgument(format!("{e:#}")))?;
        }
        Ok(())
    })?;
    loss_csv.flush()?;
    state.save_checkpoint(out.join(CHECKPOINT))?;
    eval_to_csv(&state, &data, &test_ids, &out.join(METRICS_CSV))
}

pub fn render_pose(checkpoint: &Path, poses: &Path, view: usize, out: &Path, rgb: Option<&Path>) -> anyhow::Result<()> {
    let state = TrainState::load_checkpoint(checkpoint)?;
    let records = read_poses(poses)?;
    let rec = records
        .iter()
        .find(|p| p.id == view)
        .ok_or_else(|| Error::OutOfBounds(format!("pose id {view} not in {}", poses.display())))?;
    let cube = state.render_view(&rec.camera()?)?;
    write_cube(&cube, out)?;
    if let Some(p) = rgb {
        pseudo_rgb(&cube)?.save_png(p)?;
    }
    Ok(())
}

pub fn denoise_file(checkpoint: &Path, input: &Path, out: &Path, steps: Option<usize>, tag: usize) -> anyhow::Result<()> {
    let mut state = TrainState::load_checkpoint(checkpoint)?;
    if let Some(s) = steps {
        state.config.denoise_steps = s;
    }
    let cube = read_cube(input)?;
    write_cube(&state.denoise(&cube, tag)?, out)?;
    Ok(())
}

fn heatmaps(name: &str, pred: &HyperCube, gt: &HyperCube, out: &Path) -> anyhow::Result<()> {
    for b in 0..gt.bands() {
        diff_heatmap(pred, gt, b..b + 1)?.save_png(out.join(format!("heatmap_{name}_band{b:02}.png")))?;
    }
    Ok(())
}

pub fn eval(
    pred: Option<&Path>,
    gt: Option<&Path>,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    all: bool,
    out: &Path,
) -> anyhow::Result<()> {
    create_dir(out)?;
    let mut rows = Vec::new();
    match (pred, gt, checkpoint, data) {
        (Some(p), Some(g), None, None) => {
            let (pc, gc) = (read_cube(p)?, read_cube(g)?);
            rows.push(("0000".to_string(), "raw".to_string(), MetricTable::compute(&pc, &gc)?));
            heatmaps("0000", &pc, &gc, out)?;
        }
        (None, None, Some(c), Some(d)) => {
            let state = TrainState::load_checkpoint(c)?;
            let data = Dataset::load(d)?;
            let ids: Vec<usize> = if all {
                (0..data.views.len()).collect()
            } else {
                split(data.views.len(), state.config.train_fraction, state.config.seed)?.1
            };
            let views: Vec<_> = ids
                .iter()
                .map(|&i| (data.views[i].id, &data.views[i].camera, &data.views[i].clean))
                .collect();
            let report = state.evaluate(&views, state.config.use_diffusion)?;
            for &(id, cam, gt) in &views {
                heatmaps(&format!("{id:04}"), &state.render_view(cam)?, gt, out)?;
            }
            rows = report.csv_rows();
        }
        _ => bail!(Error::InvalidArgument(
            "eval needs either --pred and --gt, or --checkpoint and --data".into()
        )),
    }
    write_metrics_csv(&rows, out.join(METRICS_CSV))?;
    Ok(())
}

pub fn gradcheck() -> anyhow::Result<()> {
    let reports = check_all()?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "{:<16} params {:>5}  max_rel_error {:.3e}  tol {:.0e}  {}",
            r.name,
            r.parameters,
            r.max_rel_error,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        );
        if !r.passed() {
            failed.push(r.name);
        }
    }
    if !failed.is_empty() {
        bail!(Error::InvalidArgument(format!("gradient check failed for {}", failed.join(", "))));
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.verb {
        Verb::Synth { out, settings } => {
            let spec = scene_spec(&settings)?;
            generate(&spec, &out)?;
            let mut echo = String::new();
            for l in settings
                .config
                .as_deref()
                .map(kv_lines)
                .transpose()?
                .unwrap_or_default()
                .iter()
                .chain(&settings.overrides)
            {
                let (k, v) = split_kv(l)?;
                echo.push_str(&format!("{k} = {v}\n"));
            }
            write_text(&out.join(SCENE_ECHO), &echo)?;
            info!("wrote {} views to {}", spec.views, out.join(POSES_FILE).display());
            Ok(())
        }
        Verb::Train {
            data,
            out,
            resume,
            settings,
        } => train(&data, &out, resume.as_deref(), &settings),
        Verb::Render {
            checkpoint,
            poses,
            view,
            out,
            rgb,
        } => render_pose(&checkpoint, &poses, view, &out, rgb.as_deref()),
        Verb::Denoise {
            checkpoint,
            input,
            out,
            steps,
            tag,
        } => denoise_file(&checkpoint, &input, &out, steps, tag),
        Verb::Eval {
            pred,
            gt,
            checkpoint,
            data,
            all,
            out,
        } => eval(pred.as_deref(), gt.as_deref(), checkpoint.as_deref(), data.as_deref(), all, &out),
        Verb::Gradcheck => gradcheck(),
    }
}
