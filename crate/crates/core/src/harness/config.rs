use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::deformation::DeformConfig;
use crate::error::{Error, Result};
use crate::hierarchy::DensifyConfig;
use crate::losses::LossWeights;
use crate::math::Vec3;

/// Reads a TOML file into `T`.
pub fn load_toml<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Gaussian and anchor positions; decays exponentially to
    /// `position * position_final_factor` over the run.
    pub position: f64,
    pub position_final_factor: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub sh: f64,
    pub network: f64,
    pub rho: f64,
    pub fusion: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final_factor: 0.01,
            rotation: 1e-3,
            log_scale: 5e-3,
            opacity: 5e-2,
            sh: 2.5e-3,
            network: 1e-3,
            rho: 1e-3,
            fusion: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    /// Standard deviation of the noise added to ground-truth positions.
    pub position_noise: f64,
    /// Start from uniform random points instead of the ground truth.
    pub cold_start: bool,
    /// Number of Gaussians for a cold start.
    pub cold_start_count: usize,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            position_noise: 0.05,
            cold_start: false,
            cold_start_count: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensifySchedule {
    /// Fractions of the run at which densification happens.
    pub fractions: Vec<f64>,
    #[serde(flatten)]
    pub params: DensifyConfig,
}

impl Default for DensifySchedule {
    fn default() -> Self {
        Self {
            fractions: vec![0.5, 0.7],
            params: DensifyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    /// Base anchor count M.
    pub anchors: usize,
    /// Fraction of the run spent in the soft stage.
    pub stage_switch: f64,
    /// When false the canonical scene is rendered at every time (the static
    /// baseline).
    pub deformation: bool,
    /// Fraction of the run at the start of the soft stage during which the
    /// filter regularizers are logged but carry no weight.
    pub regularizer_warmup: f64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: usize,
    pub loss: LossWeights,
    pub lr: LearningRates,
    pub init: InitConfig,
    pub densify: DensifySchedule,
    pub model: DeformConfig,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            iterations: 3000,
            anchors: 64,
            stage_switch: 0.4,
            deformation: true,
            regularizer_warmup: 0.1,
            checkpoint_every: 0,
            loss: LossWeights::default(),
            lr: LearningRates::default(),
            init: InitConfig::default(),
            densify: DensifySchedule::default(),
            model: DeformConfig::default(),
            data: None,
            out: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stage_switch > 0.0 && self.stage_switch < 1.0) {
            return Err(Error::Config("stage_switch must lie in (0, 1)".into()));
        }
        if !(0.0..=self.stage_switch).contains(&self.regularizer_warmup) {
            return Err(Error::Config("regularizer_warmup must lie in [0, stage_switch]".into()));
        }
        for &f in &self.densify.fractions {
            if !(f > self.stage_switch && f < 1.0) {
                return Err(Error::Config(
                    "densify fractions must lie between stage_switch and 1".into(),
                ));
            }
        }
        if self.anchors == 0 {
            return Err(Error::Config("anchors must be positive".into()));
        }
        if self.densify.params.samples < 2 {
            return Err(Error::Config("densify samples must be at least 2".into()));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    pub fn switch_iteration(&self) -> usize {
        (self.stage_switch * self.iterations as f64).round() as usize
    }

    pub fn warmup_iterations(&self) -> usize {
        (self.regularizer_warmup * self.iterations as f64).round() as usize
    }

    pub fn densify_iterations(&self) -> Vec<usize> {
        self.densify
            .fractions
            .iter()
            .map(|f| (f * self.iterations as f64).round() as usize)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionProgram {
    /// Peak translation; position offset is `amplitude·sin(2πt)·axis`.
    pub amplitude: f64,
    pub axis: Vec3,
    /// Peak rotation in degrees about `rotation_axis` through the cluster
    /// centre, `rotation_deg·sin(2πt)`.
    pub rotation_deg: f64,
    pub rotation_axis: Vec3,
    /// Split the cluster in two halves rotating in opposite phase.
    pub articulated: bool,
}

impl Default for MotionProgram {
    fn default() -> Self {
        Self {
            amplitude: 0.5,
            axis: [1.0, 0.0, 0.0],
            rotation_deg: 30.0,
            rotation_axis: [0.0, 1.0, 0.0],
            articulated: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrbitConfig {
    pub radius: f64,
    pub height: f64,
    /// Total sweep of the camera across the sequence.
    pub arc_deg: f64,
    pub focal: f64,
}

impl Default for OrbitConfig {
    fn default() -> Self {
        Self {
            radius: 2.2,
            height: 0.5,
            arc_deg: 20.0,
            focal: 140.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    /// Gaussians on a back wall and a floor that never move.
    pub static_count: usize,
    /// Half extents of the static wall (x, y); the floor shares the x extent.
    pub static_extent: [f64; 2],
    pub wall_z: f64,
    pub floor_y: f64,
    pub dynamic_count: usize,
    pub dynamic_center: Vec3,
    pub dynamic_radius: f64,
    pub motion: MotionProgram,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub camera: OrbitConfig,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            static_count: 300,
            static_extent: [2.0, 1.2],
            wall_z: 1.0,
            floor_y: -1.0,
            dynamic_count: 100,
            dynamic_center: [0.0, 0.0, 0.0],
            dynamic_radius: 0.35,
            motion: MotionProgram::default(),
            frames: 32,
            width: 64,
            height: 64,
            camera: OrbitConfig::default(),
        }
    }
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config("need at least two frames".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        if self.static_count + self.dynamic_count == 0 {
            return Err(Error::Config("scene is empty".into()));
        }
        // The moving cluster's sweep must stay clear of the wall and floor.
        let reach = self.dynamic_radius + self.motion.amplitude.abs() + 0.05;
        let c = self.dynamic_center;
        if c[2] + reach >= self.wall_z || c[1] - reach <= self.floor_y {
            return Err(Error::Config("dynamic region overlaps the static region".into()));
        }
        Ok(())
    }
}
