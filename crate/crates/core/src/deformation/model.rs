use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{AnchorTransform, InducedFlow, MotionAnchor, Stage, MAX_ANGLE};
use crate::autodiff::{Activation, BlockId, Mlp, MlpSpec, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::scene::{CanonicalGaussian, SH_COEFFS};
use crate::spatial;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Octaves of the spatial encoding.
    pub pe_space: usize,
    /// Octaves of the temporal encoding.
    pub pe_time: usize,
    pub filter_hidden: Vec<usize>,
    pub flow_hidden: Vec<usize>,
    pub extractor_hidden: Vec<usize>,
    pub feature_width: usize,
    pub deform_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            pe_space: 6,
            pe_time: 4,
            filter_hidden: vec![64, 64],
            flow_hidden: vec![128; 4],
            extractor_hidden: vec![64],
            feature_width: 64,
            deform_hidden: vec![128; 6],
            head_hidden: vec![64],
            activation: Activation::Tanh,
        }
    }
}

impl NetConfig {
    /// Width of `γ(x) ⊕ γ(t)`.
    pub fn encoding_width(&self) -> usize {
        2 * self.pe_space * 3 + 2 * self.pe_time
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformConfig {
    /// Anchors per Gaussian (K).
    pub neighbors: usize,
    /// Weight of each neighbouring frame in the temporal aggregation.
    pub temporal_lambda: f64,
    pub hard_threshold: f64,
    pub nets: NetConfig,
}

impl Default for DeformConfig {
    fn default() -> Self {
        Self {
            neighbors: 4,
            temporal_lambda: 0.25,
            hard_threshold: 0.5,
            nets: NetConfig::default(),
        }
    }
}

impl DeformConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neighbors == 0 {
            return Err(Error::Config("neighbors must be at least 1".into()));
        }
        if !(0.0..=0.5).contains(&self.temporal_lambda) {
            return Err(Error::Config("temporal_lambda must lie in [0, 0.5]".into()));
        }
        if !(0.0..=1.0).contains(&self.hard_threshold) {
            return Err(Error::Config("hard_threshold must lie in [0, 1]".into()));
        }
        if self.nets.pe_space == 0 || self.nets.pe_time == 0 || self.nets.feature_width == 0 {
            return Err(Error::Config("encoding octaves and feature width must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter blocks of the canonical Gaussians (one row per Gaussian).
#[derive(Clone, Copy, Debug)]
pub struct GaussianBlocks {
    pub mu: BlockId,
    pub rot: BlockId,
    pub log_scale: BlockId,
    pub logit_opacity: BlockId,
    pub sh: BlockId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorMeta {
    pub layer: usize,
    /// Global index of the parent anchor.
    pub parent: Option<usize>,
    pub birth_iteration: usize,
}

/// One level of the anchor hierarchy.
#[derive(Clone, Debug)]
pub struct Level {
    pub x: BlockId,
    pub log_rho: BlockId,
    pub extractor: Mlp,
    /// Zero-initialized 6×6 map applied to the head outputs above the base.
    pub projection: Option<BlockId>,
    pub fusion: BlockId,
    pub anchors: Vec<AnchorMeta>,
    /// Per Gaussian, the nearest anchors of this level (level-local ids).
    pub neighbors: Vec<Vec<usize>>,
}

impl Level {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

fn extractor_spec(nc: &NetConfig, level: usize) -> MlpSpec {
    let input = nc.encoding_width() + if level > 0 { 3 } else { 0 };
    MlpSpec::new(
        input,
        nc.extractor_hidden.clone(),
        nc.feature_width,
        nc.activation,
        Activation::None,
    )
}

struct NetSpecs {
    filter: MlpSpec,
    flow: MlpSpec,
    deform: MlpSpec,
    head: MlpSpec,
}

impl NetSpecs {
    fn new(nc: &NetConfig) -> Self {
        let enc = nc.encoding_width();
        let act = nc.activation;
        let fw = nc.feature_width;
        Self {
            filter: MlpSpec::new(enc, nc.filter_hidden.clone(), 1, act, Activation::Sigmoid),
            flow: MlpSpec::new(enc, nc.flow_hidden.clone(), 6, act, Activation::None),
            deform: MlpSpec::new(fw, nc.deform_hidden.clone(), fw, act, Activation::None),
            head: MlpSpec::new(fw, nc.head_hidden.clone(), 3, act, Activation::None),
        }
    }
}

/// Networks shared by all levels.
#[derive(Clone, Debug)]
pub struct Nets {
    pub filter: Mlp,
    pub flow: Mlp,
    pub deform: Mlp,
    pub head_t: Mlp,
    pub head_r: Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub t: f64,
    /// Frame spacing; neighbouring queries sit at `t ± dt`, clamped.
    pub dt: f64,
    pub stage: Stage,
    pub hard_threshold: f64,
    /// Replaces every anchor's α when set.
    pub alpha_override: Option<f64>,
}

impl ForwardOptions {
    pub fn new(t: f64, dt: f64, stage: Stage, hard_threshold: f64) -> Self {
        Self {
            t,
            dt,
            stage,
            hard_threshold,
            alpha_override: None,
        }
    }
}

/// Tape handles produced by [`Model::forward`].
pub struct Deformed {
    /// Deformed positions, N×3.
    pub mu: Var,
    /// Deformed rotations, N×4.
    pub rot: Var,
    /// Per level: anchor positions (n×3), α (n×1), flow (n×6) and the
    /// effective translation and rotation (n×3 each).
    pub x: Vec<Var>,
    pub alpha: Vec<Var>,
    pub flow: Vec<Var>,
    pub dt: Vec<Var>,
    pub dr: Vec<Var>,
}

/// Canonical scene, anchor hierarchy and every network, with all learnable
/// values in one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: DeformConfig,
    pub store: ParamStore,
    pub gaussians: GaussianBlocks,
    pub nets: Nets,
    pub levels: Vec<Level>,
}

fn rows<const N: usize>(items: &[[f64; N]]) -> Array2<f64> {
    Array2::from_shape_fn((items.len(), N), |(r, c)| items[r][c])
}

fn column(items: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((items.len(), 1), |(r, _)| items[r])
}

fn clamp_time(t: f64) -> f64 {
    t.clamp(0.0, 1.0)
}

impl Model {
    /// Builds a model with base-level anchors at `anchors`.
    pub fn new(
        gaussians: &[CanonicalGaussian],
        anchors: &[Vec3],
        config: DeformConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        if gaussians.is_empty() {
            return Err(Error::invalid("model needs at least one Gaussian"));
        }
        if anchors.is_empty() {
            return Err(Error::invalid("model needs at least one anchor"));
        }
        let mut store = ParamStore::new();
        let g = GaussianBlocks {
            mu: store.add("gaussians.mu", rows(&gaussians.iter().map(|g| g.mu).collect::<Vec<_>>()))?,
            rot: store.add("gaussians.rot", rows(&gaussians.iter().map(|g| g.rot).collect::<Vec<_>>()))?,
            log_scale: store.add(
                "gaussians.log_scale",
                rows(&gaussians.iter().map(|g| g.log_scale).collect::<Vec<_>>()),
            )?,
            logit_opacity: store.add(
                "gaussians.logit_opacity",
                column(&gaussians.iter().map(|g| g.logit_opacity).collect::<Vec<_>>()),
            )?,
            sh: store.add("gaussians.sh", rows(&gaussians.iter().map(|g| g.sh).collect::<Vec<_>>()))?,
        };
        let specs = NetSpecs::new(&config.nets);
        let nets = Nets {
            filter: Mlp::init(&mut store, "filter", specs.filter, true, rng)?,
            flow: Mlp::init(&mut store, "flow", specs.flow, true, rng)?,
            deform: Mlp::init(&mut store, "deform", specs.deform, false, rng)?,
            head_t: Mlp::init(&mut store, "head_t", specs.head.clone(), true, rng)?,
            head_r: Mlp::init(&mut store, "head_r", specs.head, true, rng)?,
        };
        let mut model = Self {
            config,
            store,
            gaussians: g,
            nets,
            levels: Vec::new(),
        };
        let rho = spatial::initial_rho(anchors);
        let log_rho: Vec<f64> = rho.iter().map(|r| r.ln()).collect();
        let metas = vec![
            AnchorMeta {
                layer: 0,
                parent: None,
                birth_iteration: 0,
            };
            anchors.len()
        ];
        model.push_level(anchors, &log_rho, metas, rng)?;
        Ok(model)
    }

    /// Rebuilds a model around an existing parameter store, e.g. one read
    /// from a checkpoint. `levels` gives the anchor metadata of each level;
    /// neighbour sets are recomputed.
    pub fn rebind(config: DeformConfig, store: ParamStore, levels: Vec<Vec<AnchorMeta>>) -> Result<Self> {
        config.validate()?;
        let find = |name: &str, cols: usize| -> Result<BlockId> {
            let id = store
                .id(name)
                .ok_or_else(|| Error::Incompatible(format!("missing parameter block {name}")))?;
            if store.value(id).ncols() != cols {
                return Err(Error::Incompatible(format!("block {name} has the wrong shape")));
            }
            Ok(id)
        };
        let gaussians = GaussianBlocks {
            mu: find("gaussians.mu", 3)?,
            rot: find("gaussians.rot", 4)?,
            log_scale: find("gaussians.log_scale", 3)?,
            logit_opacity: find("gaussians.logit_opacity", 1)?,
            sh: find("gaussians.sh", SH_COEFFS)?,
        };
        let n = store.value(gaussians.mu).nrows();
        for id in [gaussians.rot, gaussians.log_scale, gaussians.logit_opacity, gaussians.sh] {
            if store.value(id).nrows() != n {
                return Err(Error::Incompatible("Gaussian blocks disagree on count".into()));
            }
        }
        let specs = NetSpecs::new(&config.nets);
        let nets = Nets {
            filter: Mlp::bind(&store, "filter", specs.filter)?,
            flow: Mlp::bind(&store, "flow", specs.flow)?,
            deform: Mlp::bind(&store, "deform", specs.deform)?,
            head_t: Mlp::bind(&store, "head_t", specs.head.clone())?,
            head_r: Mlp::bind(&store, "head_r", specs.head)?,
        };
        if levels.is_empty() {
            return Err(Error::Incompatible("model has no anchor levels".into()));
        }
        let mut built = Vec::with_capacity(levels.len());
        for (l, anchors) in levels.into_iter().enumerate() {
            let x = find(&format!("anchors.{l}.x"), 3)?;
            let log_rho = find(&format!("anchors.{l}.log_rho"), 1)?;
            if anchors.is_empty()
                || store.value(x).nrows() != anchors.len()
                || store.value(log_rho).nrows() != anchors.len()
            {
                return Err(Error::Incompatible(format!("level {l} anchor count mismatch")));
            }
            let projection = if l > 0 {
                let id = find(&format!("projection.{l}"), 6)?;
                if store.value(id).nrows() != 6 {
                    return Err(Error::Incompatible(format!("projection.{l} must be 6x6")));
                }
                Some(id)
            } else {
                None
            };
            built.push(Level {
                x,
                log_rho,
                extractor: Mlp::bind(&store, &format!("extractor.{l}"), extractor_spec(&config.nets, l))?,
                projection,
                fusion: find(&format!("fusion.{l}"), 1)?,
                anchors,
                neighbors: Vec::new(),
            });
        }
        let mut model = Self {
            config,
            store,
            gaussians,
            nets,
            levels: built,
        };
        model.recompute_neighbors()?;
        Ok(model)
    }

    /// Appends a level. Above the base its extractor output and head
    /// projection start at zero, so it contributes the identity at birth.
    pub fn push_level(
        &mut self,
        x: &[Vec3],
        log_rho: &[f64],
        anchors: Vec<AnchorMeta>,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if x.is_empty() || x.len() != log_rho.len() || x.len() != anchors.len() {
            return Err(Error::invalid("level needs matching, non-empty anchor data"));
        }
        let l = self.levels.len();
        let spec = extractor_spec(&self.config.nets, l);
        let extractor = Mlp::init(&mut self.store, &format!("extractor.{l}"), spec, l > 0, rng)?;
        let projection = if l > 0 {
            Some(self.store.add(format!("projection.{l}"), Array2::zeros((6, 6)))?)
        } else {
            None
        };
        // From the third level on the newcomer splits its parent level's
        // softmax mass so the fused result is unchanged at birth.
        let logit = if l >= 2 {
            let parent = self.levels[l - 1].fusion;
            let split = self.store.value(parent)[[0, 0]] - std::f64::consts::LN_2;
            self.store.value_mut(parent)[[0, 0]] = split;
            split
        } else {
            0.0
        };
        let fusion = self.store.add(format!("fusion.{l}"), Array2::from_elem((1, 1), logit))?;
        let xb = self.store.add(format!("anchors.{l}.x"), rows(x))?;
        let rb = self.store.add(format!("anchors.{l}.log_rho"), column(log_rho))?;
        self.levels.push(Level {
            x: xb,
            log_rho: rb,
            extractor,
            projection,
            fusion,
            anchors,
            neighbors: Vec::new(),
        });
        self.recompute_neighbors_for(l)?;
        Ok(())
    }

    pub fn num_gaussians(&self) -> usize {
        self.store.value(self.gaussians.mu).nrows()
    }

    pub fn num_anchors(&self) -> usize {
        self.levels.iter().map(Level::len).sum()
    }

    /// Global index of the first anchor of each level.
    pub fn level_offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.levels.len());
        let mut acc = 0;
        for l in &self.levels {
            out.push(acc);
            acc += l.len();
        }
        out
    }

    pub fn canonical_gaussians(&self) -> Vec<CanonicalGaussian> {
        let s = &self.store;
        let (mu, rot, ls, op, sh) = (
            s.value(self.gaussians.mu),
            s.value(self.gaussians.rot),
            s.value(self.gaussians.log_scale),
            s.value(self.gaussians.logit_opacity),
            s.value(self.gaussians.sh),
        );
        (0..mu.nrows())
            .map(|j| {
                let mut coeffs = [0.0; SH_COEFFS];
                for (k, c) in coeffs.iter_mut().enumerate() {
                    *c = sh[[j, k]];
                }
                CanonicalGaussian {
                    mu: [mu[[j, 0]], mu[[j, 1]], mu[[j, 2]]],
                    rot: [rot[[j, 0]], rot[[j, 1]], rot[[j, 2]], rot[[j, 3]]],
                    log_scale: [ls[[j, 0]], ls[[j, 1]], ls[[j, 2]]],
                    logit_opacity: op[[j, 0]],
                    sh: coeffs,
                }
            })
            .collect()
    }

    pub fn anchor_positions(&self, level: usize) -> Vec<Vec3> {
        let v = self.store.value(self.levels[level].x);
        (0..v.nrows()).map(|r| [v[[r, 0]], v[[r, 1]], v[[r, 2]]]).collect()
    }

    pub fn anchor_log_rho(&self, level: usize) -> Vec<f64> {
        self.store.value(self.levels[level].log_rho).column(0).to_vec()
    }

    /// All anchors, level by level, with α evaluated at time `t`.
    pub fn anchors_at(&self, t: f64) -> Result<Vec<MotionAnchor>> {
        let mut out = Vec::with_capacity(self.num_anchors());
        for (l, level) in self.levels.iter().enumerate() {
            let x = self.anchor_positions(l);
            let lr = self.anchor_log_rho(l);
            let mut tape = Tape::new();
            let xv = tape.param(&self.store, level.x);
            let a = self.confidence(&mut tape, xv, t)?;
            let a = tape.value(a).column(0).to_vec();
            for (i, meta) in level.anchors.iter().enumerate() {
                out.push(MotionAnchor {
                    x: x[i],
                    log_rho: lr[i],
                    layer: meta.layer,
                    parent: meta.parent,
                    alpha: a[i],
                });
            }
        }
        Ok(out)
    }

    /// Rebuilds the K-nearest-anchor sets of every level from the current
    /// canonical positions.
    pub fn recompute_neighbors(&mut self) -> Result<()> {
        for l in 0..self.levels.len() {
            self.recompute_neighbors_for(l)?;
        }
        Ok(())
    }

    pub fn recompute_neighbors_for(&mut self, level: usize) -> Result<()> {
        let mu: Vec<Vec3> = self.canonical_gaussians().iter().map(|g| g.mu).collect();
        let anchors = self.anchor_positions(level);
        let k = self.config.neighbors.min(anchors.len());
        self.levels[level].neighbors = spatial::knn(&mu, &anchors, k)?;
        Ok(())
    }

    /// `γ(x) ⊕ γ(t)` for every row of `x`, with per-row times.
    fn encode(&self, tape: &mut Tape, x: Var, times: &[f64]) -> Var {
        let nc = &self.config.nets;
        let px = tape.pos_enc(x, nc.pe_space);
        let tv = tape.constant(column(times));
        let pt = tape.pos_enc(tv, nc.pe_time);
        tape.concat_cols(&[px, pt])
    }

    /// Filter confidence α for each row of `x` (n×1).
    pub fn confidence(&self, tape: &mut Tape, x: Var, t: f64) -> Result<Var> {
        let n = tape.shape(x).0;
        let e = self.encode(tape, x, &vec![t; n]);
        self.nets.filter.forward(tape, &self.store, e)
    }

    /// Induced flow for each row of `x` (n×6: backward then forward).
    pub fn flow(&self, tape: &mut Tape, x: Var, t: f64) -> Result<Var> {
        let n = tape.shape(x).0;
        let e = self.encode(tape, x, &vec![t; n]);
        self.nets.flow.forward(tape, &self.store, e)
    }

    /// Aggregated feature from the three flow-guided temporal queries.
    pub fn temporal_feature_var(
        &self,
        tape: &mut Tape,
        level: usize,
        x: Var,
        flow: Var,
        parent_dt: Option<Var>,
        t: f64,
        dt: f64,
    ) -> Result<Var> {
        let n = tape.shape(x).0;
        let back = tape.slice_cols(flow, 0, 3);
        let fwd = tape.slice_cols(flow, 3, 3);
        let xb = tape.add(x, back);
        let xf = tape.add(x, fwd);
        let q = tape.concat_rows(&[xb, x, xf]);
        let mut times = vec![clamp_time(t - dt); n];
        times.extend(std::iter::repeat_n(t, n));
        times.extend(std::iter::repeat_n(clamp_time(t + dt), n));
        let mut enc = self.encode(tape, q, &times);
        match (level, parent_dt) {
            (0, None) => {}
            (l, Some(p)) if l > 0 => {
                let p3 = tape.concat_rows(&[p, p, p]);
                enc = tape.concat_cols(&[enc, p3]);
            }
            _ => return Err(Error::invalid("parent translation is required exactly above the base level")),
        }
        let e = self.levels[level].extractor.forward(tape, &self.store, enc)?;
        let f = self.nets.deform.forward(tape, &self.store, e)?;
        let fb = tape.slice_rows(f, 0, n);
        let ft = tape.slice_rows(f, n, n);
        let ff = tape.slice_rows(f, 2 * n, n);
        let lam = self.config.temporal_lambda;
        let side = tape.add(fb, ff);
        let side = tape.scale(side, lam);
        let mid = tape.scale(ft, 1.0 - 2.0 * lam);
        Ok(tape.add(side, mid))
    }

    /// Head outputs for a batch of features: (ΔT, ΔR), each n×3.
    pub fn transform_var(&self, tape: &mut Tape, level: usize, feature: Var) -> Result<(Var, Var)> {
        let mut dt = self.nets.head_t.forward(tape, &self.store, feature)?;
        let mut dr = self.nets.head_r.forward(tape, &self.store, feature)?;
        if let Some(p) = self.levels[level].projection {
            let v = tape.concat_cols(&[dt, dr]);
            let pm = tape.param(&self.store, p);
            let v = tape.matmul(v, pm);
            dt = tape.slice_cols(v, 0, 3);
            dr = tape.slice_cols(v, 3, 3);
        }
        let dr = tape.clamp_norm(dr, MAX_ANGLE);
        Ok((dt, dr))
    }

    fn modulate(&self, tape: &mut Tape, alpha: Var, dt: Var, dr: Var, opts: &ForwardOptions) -> (Var, Var) {
        let n = tape.shape(alpha).0;
        let alpha = match opts.alpha_override {
            Some(a) => tape.constant(Array2::from_elem((n, 1), a)),
            None => alpha,
        };
        let gate = match opts.stage {
            Stage::Soft => alpha,
            Stage::Hard => {
                let thr = opts.hard_threshold;
                let mask = tape.value(alpha).mapv(|a| if a >= thr { 1.0 } else { 0.0 });
                tape.constant(mask)
            }
        };
        (tape.mul_col(dt, gate), tape.mul_col(dr, gate))
    }

    /// Applies one level's transforms on top of `(prev_pos, prev_rot)`.
    #[allow(clippy::too_many_arguments)]
    fn blend_level(
        &self,
        tape: &mut Tape,
        level: usize,
        mu: Var,
        x: Var,
        log_rho: Var,
        dt: Var,
        dr: Var,
        prev_pos: Var,
        prev_rot: Var,
    ) -> (Var, Var) {
        let nbrs = &self.levels[level].neighbors;
        let k = nbrs[0].len();
        let g_idx: Arc<[usize]> = (0..nbrs.len()).flat_map(|j| std::iter::repeat_n(j, k)).collect();
        let a_idx: Arc<[usize]> = nbrs.iter().flatten().copied().collect();
        let nk = a_idx.len();

        let mu_rep = tape.gather_rows(mu, g_idx);
        let xa = tape.gather_rows(x, a_idx.clone());
        let d = tape.sub(mu_rep, xa);
        let d2 = tape.row_norm_sq(d);
        let lr = tape.gather_rows(log_rho, a_idx.clone());
        let lr = tape.scale(lr, -2.0);
        let inv_rho2 = tape.exp(lr);
        let logits = tape.mul(d2, inv_rho2);
        let logits = tape.scale(logits, -1.0);
        let w = tape.group_softmax(logits, k);

        let dra = tape.gather_rows(dr, a_idx.clone());
        let dta = tape.gather_rows(dt, a_idx);
        let r = tape.axis_angle_mat(dra);
        let eye = tape.constant(Array2::from_shape_fn((nk, 9), |(_, c)| if c % 4 == 0 { 1.0 } else { 0.0 }));
        let r_minus_i = tape.sub(r, eye);
        let rd = tape.mat_vec(r_minus_i, d);
        let disp = tape.add(rd, dta);
        let disp = tape.mul_col(disp, w);
        let delta = tape.sum_groups(disp, k);
        let pos = tape.add(prev_pos, delta);

        let q = tape.axis_angle_quat(dra);
        let signs = hemisphere_signs(tape.value(q), k);
        let signs = tape.constant(signs);
        let q = tape.mul_col(q, signs);
        let q = tape.mul_col(q, w);
        let qsum = tape.sum_groups(q, k);
        let qn = tape.normalize_quat(qsum);
        let rot = tape.quat_mul(qn, prev_rot);
        (pos, rot)
    }

    /// Deformed positions and rotations of every Gaussian at `opts.t`.
    pub fn forward(&self, tape: &mut Tape, opts: &ForwardOptions) -> Result<Deformed> {
        let mu = tape.param(&self.store, self.gaussians.mu);
        let rot = tape.param(&self.store, self.gaussians.rot);
        let offsets = self.level_offsets();
        let mut out = Deformed {
            mu,
            rot,
            x: Vec::new(),
            alpha: Vec::new(),
            flow: Vec::new(),
            dt: Vec::new(),
            dr: Vec::new(),
        };
        let (mut pos, mut q) = (mu, rot);
        let mut level_results = Vec::with_capacity(self.levels.len());
        for (l, level) in self.levels.iter().enumerate() {
            let x = tape.param(&self.store, level.x);
            let log_rho = tape.param(&self.store, level.log_rho);
            let alpha = self.confidence(tape, x, opts.t)?;
            let flow = self.flow(tape, x, opts.t)?;
            let parent = if l == 0 {
                None
            } else {
                let idx: Arc<[usize]> = level
                    .anchors
                    .iter()
                    .map(|a| a.parent.expect("child anchors have parents") - offsets[l - 1])
                    .collect();
                let p = tape.detach(out.dt[l - 1]);
                Some(tape.gather_rows(p, idx))
            };
            let feat = self.temporal_feature_var(tape, l, x, flow, parent, opts.t, opts.dt)?;
            let (dt, dr) = self.transform_var(tape, l, feat)?;
            let (dt, dr) = self.modulate(tape, alpha, dt, dr, opts);
            (pos, q) = self.blend_level(tape, l, mu, x, log_rho, dt, dr, pos, q);
            level_results.push((pos, q));
            out.x.push(x);
            out.alpha.push(alpha);
            out.flow.push(flow);
            out.dt.push(dt);
            out.dr.push(dr);
        }
        if level_results.len() == 1 {
            (out.mu, out.rot) = level_results[0];
        } else {
            (out.mu, out.rot) = self.fuse(tape, &level_results);
        }
        Ok(out)
    }

    /// Softmax-weighted fusion of per-level results.
    fn fuse(&self, tape: &mut Tape, results: &[(Var, Var)]) -> (Var, Var) {
        let logits: Vec<Var> = self.levels.iter().map(|l| tape.param(&self.store, l.fusion)).collect();
        let logits = tape.concat_rows(&logits);
        let w = tape.group_softmax(logits, results.len());
        let q0 = tape.value(results[0].1).clone();
        let mut pos = None;
        let mut rot = None;
        for (l, &(p, q)) in results.iter().enumerate() {
            let wl = tape.slice_rows(w, l, 1);
            let sp = tape.mul_scalar(p, wl);
            let signs = align_rows(&q0, tape.value(q));
            let signs = tape.constant(signs);
            let qa = tape.mul_col(q, signs);
            let sq = tape.mul_scalar(qa, wl);
            pos = Some(match pos {
                None => sp,
                Some(acc) => tape.add(acc, sp),
            });
            rot = Some(match rot {
                None => sq,
                Some(acc) => tape.add(acc, sq),
            });
        }
        let rot = tape.normalize_quat(rot.expect("at least one level"));
        (pos.expect("at least one level"), rot)
    }

    /// Deformed copies of the canonical Gaussians; scale, opacity and
    /// colour pass through unchanged.
    pub fn gaussians_from(&self, tape: &Tape, out: &Deformed) -> Vec<CanonicalGaussian> {
        let mu = tape.value(out.mu);
        let rot = tape.value(out.rot);
        let mut gs = self.canonical_gaussians();
        for (j, g) in gs.iter_mut().enumerate() {
            g.mu = [mu[[j, 0]], mu[[j, 1]], mu[[j, 2]]];
            g.rot = [rot[[j, 0]], rot[[j, 1]], rot[[j, 2]], rot[[j, 3]]];
        }
        gs
    }

    /// The scene at time `opts.t`.
    pub fn deform_scene(&self, opts: &ForwardOptions) -> Result<Vec<CanonicalGaussian>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, opts)?;
        Ok(self.gaussians_from(&tape, &out))
    }

    /// Effective transform of every anchor, per level.
    pub fn anchor_transforms(&self, opts: &ForwardOptions) -> Result<Vec<Vec<AnchorTransform>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, opts)?;
        Ok(out
            .dt
            .iter()
            .zip(&out.dr)
            .map(|(&dt, &dr)| {
                let (a, b) = (tape.value(dt), tape.value(dr));
                (0..a.nrows())
                    .map(|i| AnchorTransform {
                        dt: [a[[i, 0]], a[[i, 1]], a[[i, 2]]],
                        dr: [b[[i, 0]], b[[i, 1]], b[[i, 2]]],
                    })
                    .collect()
            })
            .collect())
    }

    pub fn anchor_confidence(&self, x: Vec3, t: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(rows(&[x]));
        let a = self.confidence(&mut tape, xv, t)?;
        Ok(tape.scalar(a))
    }

    pub fn induced_flow(&self, x: Vec3, t: f64) -> Result<InducedFlow> {
        let mut tape = Tape::new();
        let xv = tape.constant(rows(&[x]));
        let f = self.flow(&mut tape, xv, t)?;
        let f = tape.value(f);
        Ok(InducedFlow {
            back: [f[[0, 0]], f[[0, 1]], f[[0, 2]]],
            fwd: [f[[0, 3]], f[[0, 4]], f[[0, 5]]],
        })
    }

    /// Aggregated feature of a single anchor of `level`.
    pub fn temporal_feature(
        &self,
        level: usize,
        x: Vec3,
        parent_dt: Option<Vec3>,
        t: f64,
        dt: f64,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(rows(&[x]));
        let flow = self.flow(&mut tape, xv, t)?;
        let parent = parent_dt.map(|p| tape.constant(rows(&[p])));
        let f = self.temporal_feature_var(&mut tape, level, xv, flow, parent, t, dt)?;
        Ok(tape.value(f).row(0).to_vec())
    }

    /// Raw transform predicted from a feature vector.
    pub fn anchor_transform(&self, level: usize, feature: &[f64]) -> Result<AnchorTransform> {
        if feature.len() != self.config.nets.feature_width {
            return Err(Error::invalid(format!(
                "feature width {} does not match {}",
                feature.len(),
                self.config.nets.feature_width
            )));
        }
        let mut tape = Tape::new();
        let f = tape.constant(Array2::from_shape_vec((1, feature.len()), feature.to_vec()).expect("row"));
        let (dt, dr) = self.transform_var(&mut tape, level, f)?;
        let (a, b) = (tape.value(dt), tape.value(dr));
        Ok(AnchorTransform {
            dt: [a[[0, 0]], a[[0, 1]], a[[0, 2]]],
            dr: [b[[0, 0]], b[[0, 1]], b[[0, 2]]],
        })
    }
}

/// ±1 per row so that each group of `k` quaternions shares the hemisphere
/// of its first member.
fn hemisphere_signs(q: &Array2<f64>, k: usize) -> Array2<f64> {
    Array2::from_shape_fn((q.nrows(), 1), |(r, _)| {
        let first = r - r % k;
        let dot: f64 = (0..4).map(|c| q[[r, c]] * q[[first, c]]).sum();
        if dot < 0.0 {
            -1.0
        } else {
            1.0
        }
    })
}

/// ±1 per row aligning `q` with `reference`.
fn align_rows(reference: &Array2<f64>, q: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((q.nrows(), 1), |(r, _)| {
        let dot: f64 = (0..4).map(|c| q[[r, c]] * reference[[r, c]]).sum();
        if dot < 0.0 {
            -1.0
        } else {
            1.0
        }
    })
}

