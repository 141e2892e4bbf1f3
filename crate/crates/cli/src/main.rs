use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use haif::deformation::ForwardOptions;
use haif::harness::checkpoint::load_checkpoint;
use haif::harness::config::{load_toml, SyntheticSceneSpec, TrainConfig};
use haif::harness::dataset::{generate_dataset, read_labels, Dataset, Split};
use haif::harness::{eval, train};
use haif::renderer::{render, RenderOptions};
use haif::scene::Camera;

/// Anchor-driven dynamic Gaussian splatting on the CPU.
///
/// HAIF_THREADS caps the number of worker threads.
#[derive(Parser)]
#[command(name = "haif", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset from a scene spec.
    Generate {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and the loss log to the output directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory; overrides `data` in the config.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory; overrides `out` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PSNR and SSIM of a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "heldout")]
        split: Split,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Render a checkpoint at one time from a dataset camera or a camera file.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        time: f64,
        /// Frame index into the dataset, or a TOML camera file.
        #[arg(long)]
        camera: String,
        /// Dataset for an index camera and the frame spacing; defaults to
        /// the checkpoint's training data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Frame spacing, needed when no dataset is available.
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Classify base anchors as static or dynamic against ground-truth labels.
    Anchors {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn emit(text: &str, report: Option<&Path>) -> Result<()> {
    match report {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn resolve_camera(arg: &str, data: Option<&Dataset>) -> Result<Camera> {
    if let Ok(index) = arg.parse::<usize>() {
        let Some(ds) = data else {
            bail!("camera index {index} needs a dataset (--data)");
        };
        let Some(frame) = ds.frames.get(index) else {
            bail!("camera index {index} out of range: dataset has {} frames", ds.frames.len());
        };
        return Ok(frame.camera.clone());
    }
    let camera: Camera = load_toml(arg)?;
    camera.validate()?;
    Ok(camera)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { spec, out } => {
            let spec: SyntheticSceneSpec = match spec {
                Some(p) => load_toml(p)?,
                None => SyntheticSceneSpec::default(),
            };
            let manifest = generate_dataset(&spec, &out)?;
            log::info!("wrote {} frames to {}", manifest.frames.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let mut cfg: TrainConfig = match config {
                Some(p) => load_toml(p)?,
                None => TrainConfig::default(),
            };
            cfg.data = data.or(cfg.data);
            cfg.out = out.or(cfg.out);
            let (Some(data), Some(out)) = (cfg.data.clone(), cfg.out.clone()) else {
                bail!("both a dataset (--data) and an output directory (--out) are required");
            };
            let ds = Dataset::load(&data)?;
            let outcome = train::train(&cfg, &ds, Some(&out))?;
            let last = outcome.log.last().map_or(f64::NAN, |r| r.total);
            log::info!("{} iterations, final loss {last:.5}", outcome.log.len());
        }
        Command::Eval { ckpt, data, split, report } => {
            let ds = Dataset::load(&data)?;
            let r = eval::evaluate(&ckpt, &ds, split)?;
            emit(&r.to_text(), report.as_deref())?;
        }
        Command::Render { ckpt, time, camera, data, dt, out } => {
            if !(0.0..=1.0).contains(&time) {
                bail!("time {time} outside [0, 1]");
            }
            let (model, meta) = load_checkpoint(&ckpt)?;
            let ds = match data.or_else(|| meta.train.data.clone()) {
                Some(dir) => Some(Dataset::load(dir)?),
                None => None,
            };
            let camera = resolve_camera(&camera, ds.as_ref())?;
            let scene = if meta.train.deformation {
                let Some(dt) = dt.or_else(|| ds.as_ref().map(Dataset::time_step)) else {
                    bail!("frame spacing unknown: pass --data or --dt");
                };
                let opts = ForwardOptions::new(time, dt, meta.stage, meta.train.model.hard_threshold);
                model.deform_scene(&opts)?
            } else {
                model.canonical_gaussians()
            };
            render(&scene, &camera, RenderOptions::default()).clamped().write_ppm(&out)?;
        }
        Command::Anchors { ckpt, labels, report } => {
            let (model, _) = load_checkpoint(&ckpt)?;
            let labels = read_labels(&labels)?;
            let r = eval::classify_anchors(&model, &labels)?;
            emit(&r.to_text(), report.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    haif::par::init_from_env();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
