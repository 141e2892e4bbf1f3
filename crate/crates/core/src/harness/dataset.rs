//! Synthetic half-static scenes with analytic motion.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{MotionProgram, SyntheticSceneSpec};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{self, Vec3};
use crate::renderer::{self, RenderOptions, SH_C0};
use crate::scene::{self as scene_io, Camera, CanonicalGaussian, Frame, SH_COEFFS};

pub const DATASET_FORMAT: &str = "HAIF-DATA-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENE_FILE: &str = "scene.haif";
pub const LABELS_FILE: &str = "labels.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    /// Every fourth frame in time order is held out.
    pub fn of_index(i: usize) -> Self {
        if i % 4 == 3 {
            Split::Heldout
        } else {
            Split::Train
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "heldout" | "held-out" => Ok(Split::Heldout),
            _ => Err(Error::invalid(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub time: f64,
    pub file: String,
    pub split: Split,
    pub camera: Camera,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub width: usize,
    pub height: usize,
    pub spec: SyntheticSceneSpec,
    pub frames: Vec<FrameRecord>,
}

/// Ground-truth scene: canonical Gaussians plus a dynamic flag per Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub gaussians: Vec<CanonicalGaussian>,
    pub dynamic: Vec<bool>,
}

pub fn sh_from_rgb(rgb: [f64; 3]) -> [f64; SH_COEFFS] {
    let mut sh = [0.0; SH_COEFFS];
    for c in 0..3 {
        sh[c] = (rgb[c] - 0.5) / SH_C0;
    }
    sh
}

/// Rounds every parameter through `f32`, the precision of the scene file.
fn quantize(g: &mut CanonicalGaussian) {
    let q = |v: &mut f64| *v = *v as f32 as f64;
    g.mu.iter_mut().for_each(q);
    g.rot.iter_mut().for_each(q);
    g.log_scale.iter_mut().for_each(q);
    q(&mut g.logit_opacity);
    g.sh.iter_mut().for_each(q);
}

fn random_unit_quat(rng: &mut impl Rng) -> [f64; 4] {
    loop {
        let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = math::quat_norm(q);
        if n > 0.1 && n <= 1.0 {
            let q = math::quat_normalize(q);
            return if q[0] < 0.0 { q.map(|v| -v) } else { q };
        }
    }
}

/// Builds the canonical scene described by `spec`.
pub fn ground_truth(spec: &SyntheticSceneSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [ex, ey] = spec.static_extent;
    let mut gaussians = Vec::with_capacity(spec.static_count + spec.dynamic_count);
    let mut dynamic = Vec::with_capacity(gaussians.capacity());

    let wall = spec.static_count.div_ceil(2);
    let floor_depth = spec.wall_z - spec.floor_y.abs().max(1.0) * 2.0;
    let wall_area = 2.0 * ex * (ey - spec.floor_y);
    let floor_area = 2.0 * ex * (spec.wall_z - floor_depth);
    for i in 0..spec.static_count {
        let on_wall = i < wall;
        let (count, area) = if on_wall {
            (wall, wall_area)
        } else {
            (spec.static_count - wall, floor_area)
        };
        let flat = (1.2 * (area / count.max(1) as f64).sqrt()).ln();
        let thin = 0.02f64.ln();
        let (mu, log_scale) = if on_wall {
            (
                [rng.random_range(-ex..ex), rng.random_range(spec.floor_y..ey), spec.wall_z],
                [flat, flat, thin],
            )
        } else {
            (
                [rng.random_range(-ex..ex), spec.floor_y, rng.random_range(floor_depth..spec.wall_z)],
                [flat, thin, flat],
            )
        };
        // Muted, slightly varied wall and floor tones.
        let base = if on_wall { [0.55, 0.6, 0.7] } else { [0.6, 0.5, 0.35] };
        let rgb = base.map(|c: f64| (c + rng.random_range(-0.2..0.2)).clamp(0.05, 0.95));
        gaussians.push(CanonicalGaussian {
            mu,
            rot: math::IDENTITY_QUAT,
            log_scale,
            logit_opacity: math::logit(0.9),
            sh: sh_from_rgb(rgb),
        });
        dynamic.push(false);
    }

    let r = spec.dynamic_radius;
    for _ in 0..spec.dynamic_count {
        let offset = loop {
            let p: Vec3 = std::array::from_fn(|_| rng.random_range(-r..r));
            if math::norm(p) <= r {
                break p;
            }
        };
        let size = r * 0.18;
        let log_scale = std::array::from_fn(|_| (size * rng.random_range(0.6..1.4)).ln());
        let rgb = [
            rng.random_range(0.7..1.0),
            rng.random_range(0.05..0.5),
            rng.random_range(0.05..0.3),
        ];
        gaussians.push(CanonicalGaussian {
            mu: math::add(spec.dynamic_center, offset),
            rot: random_unit_quat(&mut rng),
            log_scale,
            logit_opacity: math::logit(0.85),
            sh: sh_from_rgb(rgb),
        });
        dynamic.push(true);
    }
    gaussians.iter_mut().for_each(quantize);
    Ok(GroundTruth { gaussians, dynamic })
}

/// Rigid motion of one dynamic Gaussian at `t`: rotation about the cluster
/// centre followed by a translation. In articulated mode the half with
/// positive offset along the translation axis rotates in opposite phase.
pub fn motion_at(program: &MotionProgram, center: Vec3, canonical: Vec3, t: f64) -> (Vec3, [f64; 4]) {
    let phase = (2.0 * std::f64::consts::PI * t).sin();
    let rel = math::sub(canonical, center);
    let mut angle = program.rotation_deg.to_radians() * phase;
    if program.articulated && math::dot(rel, program.axis) > 0.0 {
        angle = -angle;
    }
    let aa = math::scale(math::normalize(program.rotation_axis), angle);
    let rot = math::axis_angle_to_mat(aa);
    let shift = math::scale(program.axis, program.amplitude * phase);
    let pos = math::add(math::add(center, math::mat_vec(&rot, rel)), shift);
    (pos, math::axis_angle_to_quat(aa))
}

/// The ground-truth scene at time `t`.
pub fn scene_at(spec: &SyntheticSceneSpec, gt: &GroundTruth, t: f64) -> Vec<CanonicalGaussian> {
    gt.gaussians
        .iter()
        .zip(&gt.dynamic)
        .map(|(g, &dynamic)| {
            let mut g = g.clone();
            if dynamic {
                let (pos, q) = motion_at(&spec.motion, spec.dynamic_center, g.mu, t);
                g.mu = pos;
                g.rot = math::quat_normalize(math::quat_mul(q, g.rot));
            }
            g
        })
        .collect()
}

pub fn frame_time(index: usize, frames: usize) -> f64 {
    index as f64 / (frames - 1) as f64
}

/// Camera of frame `index`, sweeping the orbit arc symmetrically about the
/// −z axis while looking at the dynamic cluster.
pub fn frame_camera(spec: &SyntheticSceneSpec, index: usize) -> Result<Camera> {
    let o = &spec.camera;
    let u = frame_time(index, spec.frames) - 0.5;
    let theta = (o.arc_deg * u).to_radians();
    let c = spec.dynamic_center;
    let (s, co) = math::sin_cos(theta);
    let eye = [c[0] + o.radius * s, c[1] + o.height, c[2] - o.radius * co];
    Camera::look_at(eye, c, [0.0, 1.0, 0.0], o.focal, spec.width, spec.height)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Renders every frame of `spec` into `out`: PPM frames, the manifest, the
/// canonical scene and per-Gaussian labels.
pub fn generate_dataset(spec: &SyntheticSceneSpec, out: impl AsRef<Path>) -> Result<Manifest> {
    let out = out.as_ref();
    let gt = ground_truth(spec)?;
    let frames_dir = out.join("frames");
    std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;

    let mut records = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let t = frame_time(i, spec.frames);
        let camera = frame_camera(spec, i)?;
        let scene = scene_at(spec, &gt, t);
        let image = renderer::render(&scene, &camera, RenderOptions::default()).clamped();
        let file = format!("frames/{i:04}.ppm");
        image.write_ppm(out.join(&file))?;
        records.push(FrameRecord {
            index: i,
            time: t,
            file,
            split: Split::of_index(i),
            camera,
        });
    }
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        width: spec.width,
        height: spec.height,
        spec: spec.clone(),
        frames: records,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::invalid(e.to_string()))?;
    write_file(&out.join(MANIFEST_FILE), json.as_bytes())?;
    scene_io::write_scene(out.join(SCENE_FILE), &gt.gaussians)?;
    write_file(&out.join(LABELS_FILE), labels_text(&gt).as_bytes())?;
    Ok(manifest)
}

fn labels_text(gt: &GroundTruth) -> String {
    let mut s = String::from("# label x y z\n");
    for (g, &d) in gt.gaussians.iter().zip(&gt.dynamic) {
        let label = if d { "dynamic" } else { "static" };
        let _ = writeln!(s, "{label} {} {} {}", g.mu[0], g.mu[1], g.mu[2]);
    }
    s
}

/// Ground-truth point labels: `(position, is_dynamic)`.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<(Vec3, bool)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::format(path, format!("line {}: expected `label x y z`", n + 1));
        let mut parts = line.split_whitespace();
        let dynamic = match parts.next() {
            Some("dynamic") => true,
            Some("static") => false,
            _ => return Err(bad()),
        };
        let mut p = [0.0; 3];
        for v in &mut p {
            *v = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        }
        if parts.next().is_some() {
            return Err(bad());
        }
        out.push((p, dynamic));
    }
    Ok(out)
}

/// A loaded dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub frames: Vec<Frame>,
}

impl Dataset {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let mpath = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Incompatible(format!(
                "{}: expected {DATASET_FORMAT}, found {:?}",
                mpath.display(),
                manifest.format
            )));
        }
        let mut frames = Vec::with_capacity(manifest.frames.len());
        for rec in &manifest.frames {
            let path = root.join(&rec.file);
            let pixels = Image::read_ppm(&path)?;
            if pixels.width != rec.camera.width || pixels.height != rec.camera.height {
                return Err(Error::format(&path, "image size does not match its camera"));
            }
            frames.push(Frame {
                camera: rec.camera.clone(),
                time: rec.time,
                pixels,
            });
        }
        Ok(Self { root, manifest, frames })
    }

    /// Frame indices of `split`, in time order.
    pub fn split(&self, split: Split) -> Vec<usize> {
        self.manifest
            .frames
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn scene(&self) -> Result<Vec<CanonicalGaussian>> {
        scene_io::read_scene(self.root.join(SCENE_FILE))
    }

    pub fn labels(&self) -> Result<Vec<(Vec3, bool)>> {
        read_labels(self.root.join(LABELS_FILE))
    }

    /// Median spacing between consecutive frame times.
    pub fn time_step(&self) -> f64 {
        let n = self.frames.len();
        if n < 2 {
            return 0.0;
        }
        1.0 / (n - 1) as f64
    }
}
