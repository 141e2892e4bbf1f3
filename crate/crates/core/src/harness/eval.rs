//! Metrics over dataset splits and anchor classification.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::load_checkpoint;
use super::dataset::{Dataset, Split};
use super::objective::Objective;
use crate::deformation::Model;
use crate::error::Result;
use crate::losses;
use crate::math::Vec3;
use crate::par;
use crate::renderer::RenderOptions;
use crate::spatial;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub index: usize,
    pub time: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = format!("split {:?}\nindex time psnr ssim\n", self.split).to_lowercase();
        for f in &self.frames {
            s.push_str(&format!("{} {:.4} {:.4} {:.5}\n", f.index, f.time, f.psnr, f.ssim));
        }
        s.push_str(&format!("mean psnr {:.4} ssim {:.5}\n", self.mean_psnr, self.mean_ssim));
        s
    }
}

/// Renders every frame of `split` and scores it against the stored image.
/// Renders are clamped and quantized to 8 bits like the stored frames.
pub fn evaluate_model(model: &Model, dataset: &Dataset, split: Split, objective: &Objective) -> Result<EvalReport> {
    let indices = dataset.split(split);
    let results = par::map_slice(&indices, |&i| -> Result<FrameMetrics> {
        let frame = &dataset.frames[i];
        let pred = objective.render(model, frame)?.clamped().quantized();
        Ok(FrameMetrics {
            index: i,
            time: frame.time,
            psnr: losses::psnr(&pred, &frame.pixels)?,
            ssim: losses::ssim(&pred, &frame.pixels)?,
        })
    });
    let frames = results.into_iter().collect::<Result<Vec<_>>>()?;
    let n = frames.len().max(1) as f64;
    Ok(EvalReport {
        split,
        mean_psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        mean_ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
        frames,
    })
}

/// Objective matching a checkpoint's training setup at its final stage.
pub fn checkpoint_objective(meta: &super::checkpoint::CheckpointMeta, dataset: &Dataset) -> Objective {
    Objective {
        weights: meta.train.loss,
        stage: meta.stage,
        hard_threshold: meta.train.model.hard_threshold,
        dt: dataset.time_step(),
        deformation: meta.train.deformation,
        render: RenderOptions::default(),
    }
}

pub fn evaluate(checkpoint: impl AsRef<Path>, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    evaluate_model(&model, dataset, split, &checkpoint_objective(&meta, dataset))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorRow {
    pub index: usize,
    pub x: Vec3,
    pub dynamic: bool,
    pub mean_alpha: f64,
    pub predicted_dynamic: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    /// Predicted dynamic, labelled dynamic.
    pub true_dynamic: usize,
    pub false_dynamic: usize,
    pub true_static: usize,
    pub false_static: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_dynamic + self.false_dynamic + self.true_static + self.false_static
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.total();
        if n == 0 {
            return 0.0;
        }
        (self.true_dynamic + self.true_static) as f64 / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorReport {
    pub threshold: f64,
    pub timestamps: usize,
    pub anchors: Vec<AnchorRow>,
    pub confusion: Confusion,
    pub accuracy: f64,
    /// Mean α over anchors labelled static / dynamic (NaN when none).
    pub mean_alpha_static: f64,
    pub mean_alpha_dynamic: f64,
}

impl AnchorReport {
    pub fn to_text(&self) -> String {
        let c = &self.confusion;
        format!(
            "anchors {}\nthreshold {}\npredicted\\label dynamic static\ndynamic {} {}\nstatic {} {}\naccuracy {:.4}\nmean_alpha_static {:.4}\nmean_alpha_dynamic {:.4}\n",
            c.total(),
            self.threshold,
            c.true_dynamic,
            c.false_dynamic,
            c.false_static,
            c.true_static,
            self.accuracy,
            self.mean_alpha_static,
            self.mean_alpha_dynamic
        )
    }
}

pub const VOTE_NEIGHBORS: usize = 8;
pub const ALPHA_TIMESTAMPS: usize = 16;

/// Majority label of the `VOTE_NEIGHBORS` nearest labelled points. A tied
/// vote takes the label of the single nearest point.
pub fn anchor_labels(anchors: &[Vec3], labels: &[(Vec3, bool)]) -> Result<Vec<bool>> {
    let points: Vec<Vec3> = labels.iter().map(|l| l.0).collect();
    let k = VOTE_NEIGHBORS.min(points.len());
    let nn = spatial::knn(anchors, &points, k)?;
    Ok(nn
        .iter()
        .map(|set| {
            let dynamic = set.iter().filter(|&&j| labels[j].1).count();
            let votes = 2 * dynamic;
            if votes == set.len() {
                labels[set[0]].1
            } else {
                votes > set.len()
            }
        })
        .collect())
}

/// Classifies base-level anchors as dynamic when their α, averaged over
/// uniform timestamps, reaches `threshold`.
pub fn classify_with(alphas: &[f64], positions: &[Vec3], labels: &[(Vec3, bool)], threshold: f64) -> Result<AnchorReport> {
    let truth = anchor_labels(positions, labels)?;
    let mut confusion = Confusion::default();
    let mut rows = Vec::with_capacity(alphas.len());
    let (mut sum_s, mut n_s, mut sum_d, mut n_d) = (0.0, 0usize, 0.0, 0usize);
    for (i, (&a, &dynamic)) in alphas.iter().zip(&truth).enumerate() {
        let predicted = a >= threshold;
        match (predicted, dynamic) {
            (true, true) => confusion.true_dynamic += 1,
            (true, false) => confusion.false_dynamic += 1,
            (false, false) => confusion.true_static += 1,
            (false, true) => confusion.false_static += 1,
        }
        if dynamic {
            sum_d += a;
            n_d += 1;
        } else {
            sum_s += a;
            n_s += 1;
        }
        rows.push(AnchorRow {
            index: i,
            x: positions[i],
            dynamic,
            mean_alpha: a,
            predicted_dynamic: predicted,
        });
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok(AnchorReport {
        threshold,
        timestamps: ALPHA_TIMESTAMPS,
        accuracy: confusion.accuracy(),
        confusion,
        anchors: rows,
        mean_alpha_static: mean(sum_s, n_s),
        mean_alpha_dynamic: mean(sum_d, n_d),
    })
}

pub fn classify_anchors(model: &Model, labels: &[(Vec3, bool)]) -> Result<AnchorReport> {
    let positions = model.anchor_positions(0);
    let mut alphas = vec![0.0; positions.len()];
    for s in 0..ALPHA_TIMESTAMPS {
        let t = s as f64 / (ALPHA_TIMESTAMPS - 1) as f64;
        for (acc, a) in alphas.iter_mut().zip(model.anchors_at(t)?.iter().filter(|a| a.layer == 0)) {
            *acc += a.alpha;
        }
    }
    alphas.iter_mut().for_each(|a| *a /= ALPHA_TIMESTAMPS as f64);
    classify_with(&alphas, &positions, labels, model.config.hard_threshold)
}
