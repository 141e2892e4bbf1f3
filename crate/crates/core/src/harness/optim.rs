use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::config::LearningRates;
use crate::autodiff::{BlockId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one block plus its own step count, so
/// blocks created mid-run start with fresh bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
/// `b^n` by squaring. `powi` may round differently depending on how it
/// is compiled, which would make results depend on the build profile.
fn int_pow(mut b: f64, mut n: u64) -> f64 {
    let mut acc = 1.0;
    while n > 0 {
        if n & 1 == 1 {
            acc *= b;
        }
        b *= b;
        n >>= 1;
    }
    acc
}

pub fn adam_step(
    param: &mut Array2<f64>,
    grad: &Array2<f64>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if param.dim() != grad.dim() || param.dim() != state.m.dim() || param.dim() != state.v.dim() {
        return Err(Error::invalid("adam_step: shape mismatch"));
    }
    state.step += 1;
    let c1 = 1.0 - int_pow(cfg.beta1, state.step);
    let c2 = 1.0 - int_pow(cfg.beta2, state.step);
    Zip::from(param)
        .and(grad)
        .and(&mut state.m)
        .and(&mut state.v)
        .for_each(|p, &g, m, v| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        });
    Ok(())
}

/// Learning-rate group of a parameter block, keyed by block name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Position,
    Rotation,
    LogScale,
    Opacity,
    Sh,
    Network,
    /// The anchor filter network; frozen in the hard stage.
    Filter,
    Rho,
    Fusion,
}

impl Group {
    pub fn of(name: &str) -> Self {
        match name {
            "gaussians.mu" => Group::Position,
            "gaussians.rot" => Group::Rotation,
            "gaussians.log_scale" => Group::LogScale,
            "gaussians.logit_opacity" => Group::Opacity,
            "gaussians.sh" => Group::Sh,
            n if n.starts_with("anchors.") && n.ends_with(".x") => Group::Position,
            n if n.starts_with("anchors.") && n.ends_with(".log_rho") => Group::Rho,
            n if n.starts_with("fusion.") => Group::Fusion,
            n if n.starts_with("filter.") => Group::Filter,
            _ => Group::Network,
        }
    }
}

impl LearningRates {
    /// Rate of `group` at `progress` ∈ [0, 1] through the run. Positions
    /// decay exponentially, everything else is constant.
    pub fn rate(&self, group: Group, progress: f64) -> f64 {
        match group {
            Group::Position => self.position * self.position_final_factor.powf(progress.clamp(0.0, 1.0)),
            Group::Rotation => self.rotation,
            Group::LogScale => self.log_scale,
            Group::Opacity => self.opacity,
            Group::Sh => self.sh,
            Group::Network | Group::Filter => self.network,
            Group::Rho => self.rho,
            Group::Fusion => self.fusion,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Adam {
    pub config: AdamConfig,
    /// Indexed by block id; grows as blocks are added to the store.
    pub states: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            states: Vec::new(),
        }
    }

    /// Adds state for new blocks and resets it for blocks whose shape
    /// changed.
    fn sync(&mut self, store: &ParamStore) {
        for (id, block) in store.blocks() {
            let dim = block.value.dim();
            match self.states.get_mut(id.0) {
                Some(s) if s.m.dim() == dim => {}
                Some(s) => *s = AdamState::new(dim),
                None => self.states.push(AdamState::new(dim)),
            }
        }
    }

    /// Updates every block of `store` from its accumulated gradient, then
    /// re-normalizes the Gaussian rotations. Blocks whose group is in
    /// `frozen` keep their values and moments.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        rates: &LearningRates,
        progress: f64,
        frozen: &[Group],
        rotation_block: Option<BlockId>,
    ) -> Result<()> {
        self.sync(store);
        for i in 0..self.states.len() {
            let id = BlockId(i);
            let group = Group::of(&store.block(id).name);
            if frozen.contains(&group) {
                continue;
            }
            let lr = rates.rate(group, progress);
            let (value, grad) = store.value_and_grad_mut(id);
            adam_step(value, grad, &mut self.states[i], lr, &self.config)?;
        }
        if let Some(id) = rotation_block {
            for mut row in store.value_mut(id).rows_mut() {
                let n = row.dot(&row).sqrt();
                if n > 1e-12 {
                    row /= n;
                } else {
                    row.assign(&ndarray::arr1(&[1.0, 0.0, 0.0, 0.0]));
                }
            }
        }
        Ok(())
    }
}
