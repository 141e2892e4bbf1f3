//! Variance-driven anchor densification and cross-level fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deformation::{AnchorMeta, ForwardOptions, Model};
use crate::error::{Error, Result};
use crate::math::{self, Quat, Vec3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifyConfig {
    /// Threshold on the normalized variance.
    pub tau: f64,
    pub children_per_anchor: usize,
    /// Child offsets lie in a ball of radius `offset_scale·ρ_parent`.
    pub offset_scale: f64,
    pub max_levels: usize,
    /// Timestamps per variance sweep.
    pub samples: usize,
    /// Percentile of the raw variances used for normalization.
    pub percentile: f64,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            children_per_anchor: 4,
            offset_scale: 0.5,
            max_levels: 3,
            samples: 16,
            percentile: 90.0,
        }
    }
}

/// Snapshot of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLayer {
    pub level: usize,
    /// Global anchor ids.
    pub anchors: Vec<usize>,
    pub fusion_logit: f64,
}

pub fn anchor_layers(model: &Model) -> Vec<AnchorLayer> {
    let offsets = model.level_offsets();
    model
        .levels
        .iter()
        .enumerate()
        .map(|(l, level)| AnchorLayer {
            level: l,
            anchors: (offsets[l]..offsets[l] + level.len()).collect(),
            fusion_logit: model.store.value(level.fusion)[[0, 0]],
        })
        .collect()
}

/// `(1/N)·Σ‖ΔT_t − mean ΔT‖²` over the samples of one anchor.
pub fn translation_variance(samples: &[Vec3]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::invalid("translation variance needs at least two samples"));
    }
    // Shifted by the first sample; exact zero for constant input.
    let n = samples.len() as f64;
    let d: Vec<Vec3> = samples.iter().map(|s| math::sub(*s, samples[0])).collect();
    let mut mean = [0.0; 3];
    for v in &d {
        mean = math::add(mean, *v);
    }
    mean = math::scale(mean, 1.0 / n);
    Ok(d.iter().map(|v| math::norm_sq(math::sub(*v, mean))).sum::<f64>() / n)
}

/// Nearest-rank percentile (`p` in (0, 100]).
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

/// Raw variances divided by their `p`-th percentile. All zero when the
/// percentile is zero.
pub fn normalize_variances(raw: &[f64], p: f64) -> Vec<f64> {
    let q = percentile(raw, p);
    if q > 0.0 {
        raw.iter().map(|v| v / q).collect()
    } else {
        vec![0.0; raw.len()]
    }
}

pub fn sample_timestamps(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(0.0..=1.0)).collect()
}

/// Raw translation variance of every anchor of `level` over `timestamps`,
/// using the transforms the forward pass would apply.
pub fn level_variances(model: &Model, level: usize, timestamps: &[f64], base: &ForwardOptions) -> Result<Vec<f64>> {
    let n = model.levels[level].len();
    let mut samples = vec![Vec::with_capacity(timestamps.len()); n];
    for &t in timestamps {
        let opts = ForwardOptions { t, ..*base };
        let trs = model.anchor_transforms(&opts)?;
        for (i, tr) in trs[level].iter().enumerate() {
            samples[i].push(tr.dt);
        }
    }
    samples.iter().map(|s| translation_variance(s)).collect()
}

/// Level-local ids whose normalized variance exceeds `tau`.
pub fn select(normalized: &[f64], tau: f64) -> Vec<usize> {
    normalized
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > tau)
        .map(|(i, _)| i)
        .collect()
}

fn ball_offset(rng: &mut impl Rng, radius: f64) -> Vec3 {
    loop {
        let p = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        if math::norm_sq(p) <= 1.0 {
            return math::scale(p, radius);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DensifyOutcome {
    Added {
        level: usize,
        /// Global ids of the refined anchors.
        parents: Vec<usize>,
        children: usize,
    },
    NothingSelected,
    MaxLevels,
}

/// Sweep statistics kept for inspection and oracle replay.
#[derive(Clone, Debug, PartialEq)]
pub struct DensifySweep {
    pub level: usize,
    pub timestamps: Vec<f64>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub selected: Vec<usize>,
}

/// Refines the finest level: anchors whose normalized translation
/// variance exceeds `tau` spawn children in a new level. Children start
/// with the identity transform so the rendered scene is unchanged.
pub fn densify(
    model: &mut Model,
    cfg: &DensifyConfig,
    base: &ForwardOptions,
    iteration: usize,
    rng: &mut impl Rng,
) -> Result<(DensifyOutcome, Option<DensifySweep>)> {
    if model.levels.len() >= cfg.max_levels {
        log::warn!("densify skipped: already at {} levels", cfg.max_levels);
        return Ok((DensifyOutcome::MaxLevels, None));
    }
    let level = model.levels.len() - 1;
    let timestamps = sample_timestamps(rng, cfg.samples);
    let raw = level_variances(model, level, &timestamps, base)?;
    let normalized = normalize_variances(&raw, cfg.percentile);
    let selected = select(&normalized, cfg.tau);
    let sweep = DensifySweep {
        level,
        timestamps,
        raw,
        normalized,
        selected: selected.clone(),
    };
    if selected.is_empty() {
        return Ok((DensifyOutcome::NothingSelected, Some(sweep)));
    }
    let offset = model.level_offsets()[level];
    let xs = model.anchor_positions(level);
    let lr = model.anchor_log_rho(level);
    let mut cx = Vec::new();
    let mut clr = Vec::new();
    let mut metas = Vec::new();
    for &i in &selected {
        let rho = lr[i].exp();
        for _ in 0..cfg.children_per_anchor {
            cx.push(math::add(xs[i], ball_offset(rng, cfg.offset_scale * rho)));
            clr.push(lr[i] - std::f64::consts::LN_2);
            metas.push(AnchorMeta {
                layer: level + 1,
                parent: Some(offset + i),
                birth_iteration: iteration,
            });
        }
    }
    let children = cx.len();
    model.push_level(&cx, &clr, metas, rng)?;
    Ok((
        DensifyOutcome::Added {
            level: level + 1,
            parents: selected.iter().map(|i| offset + i).collect(),
            children,
        },
        Some(sweep),
    ))
}

/// Softmax weights of the level logits.
pub fn fusion_weights(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Fuses per-level `(position, rotation)` results of one Gaussian.
pub fn fuse_layers(results: &[(Vec3, Quat)], logits: &[f64]) -> Result<(Vec3, Quat)> {
    if results.is_empty() || results.len() != logits.len() {
        return Err(Error::invalid("fusion needs one logit per level and at least one level"));
    }
    if results.len() == 1 {
        return Ok(results[0]);
    }
    let w = fusion_weights(logits);
    let q0 = results[0].1;
    let mut pos = [0.0; 3];
    let mut q = [0.0; 4];
    for ((p, r), w) in results.iter().zip(&w) {
        pos = math::add(pos, math::scale(*p, *w));
        let s = if math::quat_dot(*r, q0) < 0.0 { -1.0 } else { 1.0 };
        for c in 0..4 {
            q[c] += w * s * r[c];
        }
    }
    let n = math::quat_norm(q);
    let rot = if n < 1e-8 { q0 } else { q.map(|c| c / n) };
    Ok((pos, rot))
}
