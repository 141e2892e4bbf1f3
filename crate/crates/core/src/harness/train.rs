//! The two-stage optimization loop.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, CheckpointMeta};
use super::config::{to_toml, TrainConfig};
use super::dataset::{Dataset, Split};
use super::eval;
use super::objective::Objective;
use super::optim::{Adam, AdamConfig, Group};
use crate::deformation::{Model, Stage};
use crate::error::{Error, Result};
use crate::hierarchy::{self, DensifyOutcome};
use crate::losses::LossParts;
use crate::math::{self, Vec3};
use crate::renderer::RenderOptions;
use crate::scene::{CanonicalGaussian, SH_COEFFS};
use crate::spatial;

pub const LOG_FILE: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub stage: Stage,
    pub frame: usize,
    pub total: f64,
    pub parts: LossParts,
    /// Live anchors per level.
    pub anchors: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DensifyEvent {
    pub iteration: usize,
    pub outcome: DensifyOutcome,
    /// Largest per-channel change of a training render across the event.
    pub render_change: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub meta: CheckpointMeta,
    pub log: Vec<LogRow>,
    pub densify: Vec<DensifyEvent>,
    /// Mean training-frame PSNR before the first step and at the stage
    /// switch (absent when the run ends before it).
    pub initial_train_psnr: f64,
    pub soft_stage_train_psnr: Option<f64>,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("iteration,stage,frame,total,photometric,cycle,entropy,sparsity,anchors\n");
    for r in rows {
        let stage = match r.stage {
            Stage::Soft => "soft",
            Stage::Hard => "hard",
        };
        let anchors: Vec<String> = r.anchors.iter().map(usize::to_string).collect();
        let _ = writeln!(
            s,
            "{},{stage},{},{:e},{:e},{:e},{:e},{:e},{}",
            r.iteration,
            r.frame,
            r.total,
            r.parts.photo,
            r.parts.cycle,
            r.parts.entropy,
            r.parts.sparsity,
            anchors.join(";")
        );
    }
    s
}

/// Initial canonical Gaussians: the ground truth with jittered positions
/// and gray colour, or uniform random points over its bounding box.
pub fn initial_gaussians(cfg: &TrainConfig, truth: &[CanonicalGaussian], rng: &mut impl Rng) -> Result<Vec<CanonicalGaussian>> {
    if truth.is_empty() {
        return Err(Error::invalid("ground-truth scene is empty"));
    }
    let gray = [0.0; SH_COEFFS];
    if cfg.init.cold_start {
        let mut lo = truth[0].mu;
        let mut hi = truth[0].mu;
        for g in truth {
            for k in 0..3 {
                lo[k] = lo[k].min(g.mu[k]);
                hi[k] = hi[k].max(g.mu[k]);
            }
        }
        let n = cfg.init.cold_start_count.max(1);
        let volume: f64 = (0..3).map(|k| (hi[k] - lo[k]).max(0.1)).product();
        let size = (volume / n as f64).cbrt() * 0.5;
        return Ok((0..n)
            .map(|_| CanonicalGaussian {
                mu: std::array::from_fn(|k| {
                    if hi[k] > lo[k] {
                        rng.random_range(lo[k]..=hi[k])
                    } else {
                        lo[k]
                    }
                }),
                rot: math::IDENTITY_QUAT,
                log_scale: [size.ln(); 3],
                logit_opacity: math::logit(0.5),
                sh: gray,
            })
            .collect());
    }
    let sigma = cfg.init.position_noise;
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    Ok(truth
        .iter()
        .map(|g| {
            let mut g = g.clone();
            if sigma > 0.0 {
                for v in &mut g.mu {
                    *v += noise.sample(rng);
                }
            }
            g.sh = gray;
            g
        })
        .collect())
}

pub fn initial_model(cfg: &TrainConfig, dataset: &Dataset, rng: &mut impl Rng) -> Result<Model> {
    let truth = dataset.scene()?;
    let gaussians = initial_gaussians(cfg, &truth, rng)?;
    let points: Vec<Vec3> = gaussians.iter().map(|g| g.mu).collect();
    let m = cfg.anchors.min(points.len());
    let picks = spatial::farthest_point_sample(&points, m, cfg.seed)?;
    let anchors: Vec<Vec3> = picks.iter().map(|&i| points[i]).collect();
    Model::new(&gaussians, &anchors, cfg.model.clone(), rng)
}

pub fn stage_at(cfg: &TrainConfig, iteration: usize) -> Stage {
    if iteration < cfg.switch_iteration() {
        Stage::Soft
    } else {
        Stage::Hard
    }
}

pub fn objective(cfg: &TrainConfig, dataset: &Dataset, stage: Stage) -> Objective {
    Objective {
        weights: cfg.loss,
        stage,
        hard_threshold: cfg.model.hard_threshold,
        dt: dataset.time_step(),
        deformation: cfg.deformation,
        render: RenderOptions::default(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs the full schedule. With `out` set, writes the loss log, the
/// resolved config and checkpoints there.
pub fn train(cfg: &TrainConfig, dataset: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_frames = dataset.split(Split::Train);
    if train_frames.is_empty() {
        return Err(Error::invalid("dataset has no training frames"));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("config.toml"), &to_toml(cfg)?)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = initial_model(cfg, dataset, &mut rng)?;
    let mut adam = Adam::new(AdamConfig::default());
    let densify_at = if cfg.deformation {
        cfg.densify_iterations()
    } else {
        Vec::new()
    };
    let switch = cfg.switch_iteration();
    let meta_at = |iteration: usize| CheckpointMeta {
        iteration,
        stage: stage_at(cfg, iteration),
        train: cfg.clone(),
    };

    let initial_train_psnr = eval::evaluate_model(&model, dataset, Split::Train, &objective(cfg, dataset, Stage::Soft))?.mean_psnr;
    let mut soft_stage_train_psnr = None;
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut events = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut last_good = model.clone();

    for it in 0..cfg.iterations {
        let stage = stage_at(cfg, it);
        let mut obj = objective(cfg, dataset, stage);
        if it < cfg.warmup_iterations() {
            obj.weights.lambda_entropy = 0.0;
            obj.weights.lambda_sparsity = 0.0;
        }
        if it == switch {
            soft_stage_train_psnr = Some(eval::evaluate_model(&model, dataset, Split::Train, &objective(cfg, dataset, Stage::Soft))?.mean_psnr);
        }
        if densify_at.contains(&it) {
            let probe = &dataset.frames[train_frames[0]];
            let before = obj.render(&model, probe)?;
            let base = obj.forward_options(probe.time);
            let (outcome, _) = hierarchy::densify(&mut model, &cfg.densify.params, &base, it, &mut rng)?;
            let after = obj.render(&model, probe)?;
            let render_change = before
                .color
                .data
                .iter()
                .zip(&after.color.data)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            log::info!("iteration {it}: densify {outcome:?}, render change {render_change:e}");
            events.push(DensifyEvent {
                iteration: it,
                outcome,
                render_change,
            });
        }
        if order.is_empty() {
            // New epoch: reshuffle and refresh the anchor neighbourhoods.
            order = train_frames.clone();
            order.shuffle(&mut rng);
            order.reverse();
            if cfg.deformation {
                model.recompute_neighbors()?;
            }
        }
        let frame = order.pop().expect("non-empty epoch");

        model.store.zero_grad();
        let eval = match obj.loss_and_grad(&mut model, &dataset.frames[frame], it) {
            Ok(e) => e,
            Err(err @ Error::NonFinite { .. }) => {
                if let Some(dir) = out {
                    save_checkpoint(dir.join(LAST_GOOD_CHECKPOINT), &last_good, &meta_at(it.saturating_sub(1)))?;
                    write_text(&dir.join(LOG_FILE), &log_csv(&log))?;
                }
                return Err(err);
            }
            Err(e) => return Err(e),
        };
        log.push(LogRow {
            iteration: it,
            stage,
            frame,
            total: crate::losses::total_loss(&eval.parts, &cfg.loss, it)?,
            parts: eval.parts,
            anchors: model.levels.iter().map(|l| l.len()).collect(),
        });
        last_good.clone_from(&model);
        let progress = it as f64 / cfg.iterations.max(1) as f64;
        // The hard mask is piecewise constant, so only the filter
        // regularizers would move the filter; they would drive every α to 0.
        let frozen: &[Group] = if stage == Stage::Hard { &[Group::Filter] } else { &[] };
        adam.step(&mut model.store, &cfg.lr, progress, frozen, Some(model.gaussians.rot))?;
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(dir.join(format!("iter_{:06}.ckpt", it + 1)), &model, &meta_at(it + 1))?;
            }
        }
    }
    let meta = CheckpointMeta {
        iteration: cfg.iterations,
        stage: stage_at(cfg, cfg.iterations),
        train: cfg.clone(),
    };
    if let Some(dir) = out {
        write_text(&dir.join(LOG_FILE), &log_csv(&log))?;
        save_checkpoint(dir.join(FINAL_CHECKPOINT), &model, &meta)?;
    }
    Ok(TrainOutcome {
        model,
        meta,
        log,
        densify: events,
        initial_train_psnr,
        soft_stage_train_psnr,
    })
}
