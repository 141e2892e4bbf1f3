#![allow(dead_code)]

use haif::autodiff::{BlockId, ParamStore};
use haif::deformation::{AnchorMeta, DeformConfig, Model, NetConfig, Stage};
use haif::gradcheck::{self, GradReport};
use haif::harness::objective::Objective;
use haif::image::Image;
use haif::losses::LossWeights;
use haif::math::{self, Vec3};
use haif::renderer::RenderOptions;
use haif::scene::{Camera, CanonicalGaussian, Frame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_H: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-3;
/// Two step sizes disagreeing by more than this flag a jump or kink.
pub const SMOOTH_TOL: f64 = 1e-2;

pub fn tiny_nets() -> NetConfig {
    NetConfig {
        filter_hidden: vec![8],
        flow_hidden: vec![8, 8],
        extractor_hidden: vec![8],
        feature_width: 6,
        deform_hidden: vec![8, 8],
        head_hidden: vec![8],
        ..NetConfig::default()
    }
}

pub fn random_gaussian(rng: &mut impl Rng) -> CanonicalGaussian {
    CanonicalGaussian {
        mu: std::array::from_fn(|_| rng.random_range(-0.8..0.8)),
        rot: math::quat_normalize(std::array::from_fn(|_| rng.random_range(-1.0..1.0))),
        log_scale: std::array::from_fn(|_| rng.random_range(-1.6..-0.9)),
        logit_opacity: rng.random_range(-1.0..2.0),
        sh: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
    }
}

/// Overwrites every block whose name starts with one of `prefixes`.
pub fn randomize(store: &mut ParamStore, prefixes: &[&str], scale: f64, rng: &mut impl Rng) {
    let ids: Vec<BlockId> = store
        .blocks()
        .filter(|(_, b)| prefixes.iter().any(|p| b.name.starts_with(p)))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let v = store.value(id).mapv(|_| rng.random_range(-scale..scale));
        store.replace(id, v);
    }
}

pub struct GradCase {
    pub model: Model,
    pub objective: Objective,
    pub frame: Frame,
}

/// A random model with at most 3 Gaussians and 4 anchors over one or two
/// levels, every network woken up, rendered at 16×16 against a target that keeps
/// each pixel residual at least 0.05 away from zero.
pub fn grad_case(seed: u64, stage: Stage) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=3);
    let gaussians: Vec<CanonicalGaussian> = (0..n).map(|_| random_gaussian(&mut rng)).collect();
    let two_levels = seed % 2 == 0;
    let base = if two_levels { 3 } else { 4 };
    let anchors: Vec<Vec3> = (0..base)
        .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
        .collect();
    let config = DeformConfig {
        nets: tiny_nets(),
        ..DeformConfig::default()
    };
    let mut model = Model::new(&gaussians, &anchors, config, &mut rng).unwrap();
    if two_levels {
        let x = [math::add(anchors[0], [0.1, -0.05, 0.08])];
        let log_rho = [model.anchor_log_rho(0)[0] - std::f64::consts::LN_2];
        let meta = vec![AnchorMeta {
            layer: 1,
            parent: Some(0),
            birth_iteration: 0,
        }];
        model.push_level(&x, &log_rho, meta, &mut rng).unwrap();
    }
    // Hidden layers keep their random init. The zero-initialized output
    // layers are drawn at the scale of trained motion: small per-frame
    // flows and transforms, α spread around one half.
    let nets = &model.config.nets;
    let out = |name: &str, hidden: &[usize]| format!("{name}.{}.", hidden.len());
    let filter_out = out("filter", &nets.filter_hidden);
    let motion_out = [
        out("flow", &nets.flow_hidden),
        out("head_t", &nets.head_hidden),
        out("head_r", &nets.head_hidden),
    ];
    let child_out = out("extractor.1", &nets.extractor_hidden);
    randomize(&mut model.store, &[&filter_out, "fusion"], 0.6, &mut rng);
    randomize(&mut model.store, &motion_out.each_ref().map(String::as_str), 0.1, &mut rng);
    randomize(&mut model.store, &[&child_out, "projection"], 0.3, &mut rng);

    let camera = Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 20.0, 16, 16).unwrap();
    let objective = Objective {
        weights: LossWeights::default(),
        stage,
        hard_threshold: 0.5,
        dt: 1.0 / 31.0,
        deformation: true,
        render: RenderOptions::default(),
    };
    let time = rng.random_range(0.2..0.8);
    let blank = Frame {
        camera: camera.clone(),
        time,
        pixels: Image::new(16, 16),
    };
    let pred = objective.render(&model, &blank).unwrap().color;
    let mut pixels = pred.clone();
    for v in pixels.data.iter_mut() {
        let offset = rng.random_range(0.05..0.4);
        *v += if rng.random_bool(0.5) { offset } else { -offset };
    }
    GradCase {
        model,
        objective,
        frame: Frame { camera, time, pixels },
    }
}

/// Every parameter scalar of the full objective against central
/// differences, with the detached child-level inputs held at their
/// unperturbed values.
pub fn check_case(case: &mut GradCase) -> GradReport {
    let GradCase {
        model,
        objective,
        frame,
    } = case;
    model.store.zero_grad();
    objective.loss_and_grad(model, frame, 0).unwrap();
    let ids: Vec<BlockId> = model.store.blocks().map(|(id, _)| id).collect();
    let entries = gradcheck::all_entries(&model.store, &ids);
    let frozen = objective.detached_values(model, frame).unwrap();
    let mut probe = model.clone();
    let mut store = std::mem::take(&mut model.store);
    let report = gradcheck::check_entries_piecewise(&mut store, &entries, GRAD_H, SMOOTH_TOL, &mut |s| {
        probe.store.clone_from(s);
        objective.loss_frozen(&probe, frame, 0, &frozen).unwrap().total
    });
    model.store = store;
    report
}

pub fn blocks_with_gradient(model: &Model) -> Vec<String> {
    model
        .store
        .blocks()
        .filter(|(id, _)| model.store.grad(*id).iter().any(|&g| g != 0.0))
        .map(|(_, b)| b.name.clone())
        .collect()
}
