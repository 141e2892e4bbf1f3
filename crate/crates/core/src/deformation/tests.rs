use super::*;
use crate::autodiff::{Activation, Tape};
use crate::gradcheck;
use crate::losses;
use crate::math::IDENTITY_QUAT;
use crate::renderer::{render, RenderOptions};
use crate::scene::{Camera, SH_COEFFS};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> DeformConfig {
    DeformConfig {
        nets: NetConfig {
            filter_hidden: vec![8],
            flow_hidden: vec![8, 8],
            extractor_hidden: vec![8],
            feature_width: 6,
            deform_hidden: vec![8, 8],
            head_hidden: vec![8],
            ..NetConfig::default()
        },
        ..DeformConfig::default()
    }
}

fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Vec<CanonicalGaussian> {
    (0..n)
        .map(|_| {
            let mut sh = [0.0; SH_COEFFS];
            for v in sh.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            CanonicalGaussian {
                mu: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
                rot: math::quat_normalize([
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ]),
                log_scale: [rng.random_range(-2.5..-1.5); 3],
                logit_opacity: rng.random_range(-1.0..2.0),
                sh,
            }
        })
        .collect()
}

fn random_model(seed: u64, n: usize, m: usize) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gs = random_scene(&mut rng, n);
    let anchors: Vec<Vec3> = (0..m)
        .map(|_| {
            [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    Model::new(&gs, &anchors, small_config(), &mut rng).unwrap()
}

/// Overwrites every block whose name starts with `prefix` with random
/// values, waking up zero-initialized layers.
fn randomize(model: &mut Model, prefix: &str, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model
        .store
        .blocks()
        .filter(|(_, b)| b.name.starts_with(prefix))
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let v = model.store.value(id).mapv(|_| rng.random_range(-scale..scale));
        model.store.replace(id, v);
    }
}

fn camera() -> Camera {
    Camera::look_at([0.0, 0.0, -4.0], [0.0; 3], [0.0, -1.0, 0.0], 20.0, 16, 16).unwrap()
}

fn opts(t: f64, stage: Stage) -> ForwardOptions {
    ForwardOptions::new(t, 0.1, stage, 0.5)
}

#[test]
fn identity_blend_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for g in random_scene(&mut rng, 20) {
        let nb = vec![
            ([0.1, 0.2, 0.3], AnchorTransform::IDENTITY, 0.3),
            ([-0.4, 0.0, 0.9], AnchorTransform::IDENTITY, 0.7),
        ];
        let (p, q) = blend_gaussian(&g, &nb);
        assert_eq!(p, g.mu);
        assert_eq!(q, g.rot);
    }
}

#[test]
fn single_neighbor_translation() {
    let g = CanonicalGaussian {
        mu: [0.3, -0.2, 0.5],
        rot: IDENTITY_QUAT,
        log_scale: [0.0; 3],
        logit_opacity: 0.0,
        sh: [0.0; SH_COEFFS],
    };
    let tr = AnchorTransform {
        dt: [1.0, 0.0, 0.0],
        dr: [0.0; 3],
    };
    let (p, _) = blend_gaussian(&g, &[([0.0; 3], tr, 1.0)]);
    assert_eq!(p, [1.3, -0.2, 0.5]);
}

#[test]
fn two_neighbor_average() {
    let g = CanonicalGaussian {
        mu: [0.0; 3],
        rot: IDENTITY_QUAT,
        log_scale: [0.0; 3],
        logit_opacity: 0.0,
        sh: [0.0; SH_COEFFS],
    };
    let a = AnchorTransform {
        dt: [2.0, 0.0, 0.0],
        dr: [0.0; 3],
    };
    let b = AnchorTransform {
        dt: [0.0, 2.0, 0.0],
        dr: [0.0; 3],
    };
    let (p, _) = blend_gaussian(&g, &[([1.0, 0.0, 0.0], a, 0.5), ([0.0, 1.0, 0.0], b, 0.5)]);
    for (got, want) in p.iter().zip([1.0, 1.0, 0.0]) {
        assert!((got - want).abs() < 1e-12);
    }
}

fn vec3() -> impl Strategy<Value = Vec3> {
    [-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0]
}

proptest! {
    #[test]
    fn shared_rigid_transform_is_exact(
        mu in vec3(), axis in vec3(), shift in vec3(),
        xs in prop::collection::vec(vec3(), 1..6),
        raw in prop::collection::vec(0.01f64..1.0, 6),
    ) {
        let dr = math::scale(axis, 0.7);
        let r = math::axis_angle_to_mat(dr);
        let total: f64 = raw[..xs.len()].iter().sum();
        let nb: Vec<_> = xs.iter().zip(&raw).map(|(x, w)| {
            // Anchor transform consistent with p ↦ R·p + shift.
            let dt = math::add(shift, math::sub(math::mat_vec(&r, *x), *x));
            (*x, AnchorTransform { dt, dr }, w / total)
        }).collect();
        let g = CanonicalGaussian { mu, rot: IDENTITY_QUAT, log_scale: [0.0; 3], logit_opacity: 0.0, sh: [0.0; SH_COEFFS] };
        let (p, q) = blend_gaussian(&g, &nb);
        let want = math::add(math::mat_vec(&r, mu), shift);
        for k in 0..3 {
            prop_assert!((p[k] - want[k]).abs() < 1e-9);
        }
        let wq = math::axis_angle_to_quat(dr);
        for k in 0..4 {
            prop_assert!((q[k] - wq[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn blended_rotation_is_unit(
        drs in prop::collection::vec(vec3(), 1..6),
        raw in prop::collection::vec(0.01f64..1.0, 6),
        rot in [-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0],
    ) {
        prop_assume!(math::quat_norm(rot) > 0.1);
        let total: f64 = raw[..drs.len()].iter().sum();
        let nb: Vec<_> = drs.iter().zip(&raw).map(|(d, w)| {
            ([0.0; 3], AnchorTransform { dt: [0.0; 3], dr: *d }, w / total)
        }).collect();
        let g = CanonicalGaussian { mu: [0.0; 3], rot: math::quat_normalize(rot), log_scale: [0.0; 3], logit_opacity: 0.0, sh: [0.0; SH_COEFFS] };
        let (_, q) = blend_gaussian(&g, &nb);
        prop_assert!((math::quat_norm(q) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn identity_at_init_is_bit_exact() {
    let model = random_model(2, 30, 6);
    let canonical = model.canonical_gaussians();
    let cam = camera();
    let base = render(&canonical, &cam, RenderOptions::default());
    for t in [0.0, 0.3, 1.0] {
        for stage in [Stage::Soft, Stage::Hard] {
            let d = model.deform_scene(&opts(t, stage)).unwrap();
            assert_eq!(d, canonical);
            let img = render(&d, &cam, RenderOptions::default());
            assert_eq!(img.color.data, base.color.data);
        }
    }
}

#[test]
fn blend_path_matches_scalar_blend() {
    let mut model = random_model(3, 12, 5);
    randomize(&mut model, "head_", 0.4, 1);
    randomize(&mut model, "filter", 0.5, 2);
    let o = opts(0.4, Stage::Soft);
    let deformed = model.deform_scene(&o).unwrap();
    let trs = model.anchor_transforms(&o).unwrap();
    let xs = model.anchor_positions(0);
    let rho: Vec<f64> = model.anchor_log_rho(0).iter().map(|l| l.exp()).collect();
    for (j, g) in model.canonical_gaussians().iter().enumerate() {
        let ids = &model.levels[0].neighbors[j];
        let w = crate::spatial::influence_weights(g.mu, &ids.iter().map(|&i| (xs[i], rho[i])).collect::<Vec<_>>());
        let nb: Vec<_> = ids.iter().zip(&w).map(|(&i, &w)| (xs[i], trs[0][i], w)).collect();
        let (p, q) = blend_gaussian(g, &nb);
        for k in 0..3 {
            assert!((p[k] - deformed[j].mu[k]).abs() < 1e-12);
        }
        for k in 0..4 {
            assert!((q[k] - deformed[j].rot[k]).abs() < 1e-12);
        }
    }
}

#[test]
fn hard_stage_below_threshold_is_canonical() {
    let mut model = random_model(4, 20, 6);
    randomize(&mut model, "head_", 0.5, 3);
    let canonical = model.canonical_gaussians();
    // Filter output starts at exactly 0.5.
    let mut o = opts(0.5, Stage::Hard);
    o.hard_threshold = 0.75;
    assert_eq!(model.deform_scene(&o).unwrap(), canonical);
    let moved = model.deform_scene(&opts(0.5, Stage::Soft)).unwrap();
    assert_ne!(moved, canonical);
}

#[test]
fn soft_with_unit_alpha_equals_hard_at_zero_threshold() {
    let mut model = random_model(5, 20, 6);
    randomize(&mut model, "head_", 0.5, 4);
    randomize(&mut model, "filter", 0.8, 5);
    let mut soft = opts(0.7, Stage::Soft);
    soft.alpha_override = Some(1.0);
    let mut hard = opts(0.7, Stage::Hard);
    hard.hard_threshold = 0.0;
    let a = model.deform_scene(&soft).unwrap();
    let b = model.deform_scene(&hard).unwrap();
    assert_eq!(a, b);
    let cam = camera();
    assert_eq!(
        render(&a, &cam, RenderOptions::default()).color.data,
        render(&b, &cam, RenderOptions::default()).color.data
    );
}

#[test]
fn deformation_passes_appearance_through() {
    let mut model = random_model(6, 15, 4);
    randomize(&mut model, "head_", 0.5, 6);
    let c = model.canonical_gaussians();
    let d = model.deform_scene(&opts(0.2, Stage::Soft)).unwrap();
    for (a, b) in c.iter().zip(&d) {
        assert_eq!(a.log_scale, b.log_scale);
        assert_eq!(a.logit_opacity, b.logit_opacity);
        assert_eq!(a.sh, b.sh);
    }
}

#[test]
fn confidence_at_init_and_range() {
    let mut model = random_model(7, 5, 4);
    assert_eq!(model.anchor_confidence([0.3, 0.1, -0.2], 0.4).unwrap(), 0.5);
    randomize(&mut model, "filter", 1.0, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..1000 {
        let x = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let a = model.anchor_confidence(x, rng.random_range(0.0..1.0)).unwrap();
        assert!(a > 0.0 && a < 1.0);
    }
}

#[test]
fn flow_at_init_and_extremes() {
    let mut model = random_model(9, 5, 4);
    assert_eq!(model.induced_flow([0.2, 0.4, 0.1], 0.3).unwrap(), InducedFlow::default());
    randomize(&mut model, "flow", 1.0, 9);
    let f = model.induced_flow([100.0, -100.0, 57.7], 1.0).unwrap();
    assert!(f.back.iter().chain(&f.fwd).all(|v| v.is_finite()));
}

#[test]
fn flow_gradient_matches_differences() {
    let mut model = random_model(10, 5, 4);
    randomize(&mut model, "flow", 0.6, 10);
    let x = [0.3, -0.4, 0.2];
    let loss = |m: &Model, tape: &mut Tape| {
        let xv = tape.constant(Array2::from_shape_vec((1, 3), x.to_vec()).unwrap());
        let f = m.flow(tape, xv, 0.6).unwrap();
        let fwd = tape.slice_cols(f, 3, 3);
        let n = tape.row_norm_sq(fwd);
        tape.sum(n)
    };
    let mut tape = Tape::new();
    let l = loss(&model, &mut tape);
    model.store.zero_grad();
    tape.backward(l, &mut model.store).unwrap();
    let ids: Vec<_> = model.nets.flow.block_ids().collect();
    let entries = gradcheck::all_entries(&model.store, &ids);
    let mut store = model.store.clone();
    let report = gradcheck::check_entries(&mut store, &entries, 1e-4, &mut |s| {
        let mut m = model.clone();
        m.store = s.clone();
        let mut tape = Tape::new();
        let l = loss(&m, &mut tape);
        tape.scalar(l)
    });
    assert!(report.worst_rel <= 1e-3, "{report:?}");
}

#[test]
fn temporal_weights_collapse_for_static_queries() {
    // Zero flow and dt = 0 make all three queries equal, so the aggregate
    // equals the centre feature exactly.
    let model = random_model(11, 5, 4);
    let x = [0.1, 0.2, 0.3];
    let f = model.temporal_feature(0, x, None, 0.5, 0.0).unwrap();
    let mut lone = model.clone();
    lone.config.temporal_lambda = 0.0;
    let centre = lone.temporal_feature(0, x, None, 0.5, 0.37).unwrap();
    assert_eq!(f, centre);
    assert_eq!(DeformConfig::default().temporal_lambda, 0.25);
    let edge = model.temporal_feature(0, x, None, 0.0, 0.1).unwrap();
    assert!(edge.iter().all(|v| v.is_finite()));
}

#[test]
fn temporal_aggregation_weights() {
    let mut model = random_model(12, 5, 4);
    randomize(&mut model, "flow", 0.5, 12);
    let x = [0.1, -0.2, 0.4];
    let only = |lam: f64, m: &Model| {
        let mut m = m.clone();
        m.config.temporal_lambda = lam;
        m.temporal_feature(0, x, None, 0.5, 0.1).unwrap()
    };
    // λ = 0.5 averages the two side features; λ = 0 keeps the centre.
    let side = only(0.5, &model);
    let centre = only(0.0, &model);
    let mixed = only(0.25, &model);
    for k in 0..mixed.len() {
        assert!((mixed[k] - (0.5 * side[k] + 0.5 * centre[k])).abs() < 1e-12);
    }
}

#[test]
fn transform_heads_and_clamp() {
    let mut model = random_model(13, 5, 4);
    let zero = model.anchor_transform(0, &[0.3; 6]).unwrap();
    assert_eq!(zero, AnchorTransform::IDENTITY);
    let id = model.nets.head_r.layers.last().unwrap().1;
    model.store.replace(id, Array2::from_shape_vec((1, 3), vec![4.0, 0.0, 0.0]).unwrap());
    let big = model.anchor_transform(0, &[0.3; 6]).unwrap();
    assert!((math::norm(big.dr) - MAX_ANGLE).abs() < 1e-12);
    assert!(model.anchor_transform(0, &[0.3; 5]).is_err());
}

#[test]
fn cycle_loss_cases() {
    let mut model = random_model(14, 5, 4);
    let xs = model.anchor_positions(0);
    assert_eq!(losses::cycle_loss(&model, &xs, 0.5, 0.1).unwrap(), 0.0);
    let (w, b) = *model.nets.flow.layers.last().unwrap();
    let v = [0.2, -0.1, 0.3];
    let set = |model: &mut Model, back: Vec3, fwd: Vec3| {
        let dim = model.store.value(w).dim();
        model.store.replace(w, Array2::zeros(dim));
        let bias: Vec<f64> = back.iter().chain(&fwd).copied().collect();
        model.store.replace(b, Array2::from_shape_vec((1, 6), bias).unwrap());
    };
    randomize(&mut model, "flow.0", 0.5, 14);
    set(&mut model, math::scale(v, -1.0), v);
    assert!(losses::cycle_loss(&model, &xs, 0.5, 0.1).unwrap().abs() < 1e-12);
    set(&mut model, v, v);
    let got = losses::cycle_loss(&model, &xs, 0.5, 0.1).unwrap();
    assert!((got - 8.0 * math::norm_sq(v)).abs() < 1e-9, "{got}");
}

#[test]
fn activation_is_configurable() {
    let mut cfg = small_config();
    cfg.nets.activation = Activation::Relu;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let gs = random_scene(&mut rng, 5);
    let m = Model::new(&gs, &[[0.0; 3], [1.0, 0.0, 0.0]], cfg, &mut rng).unwrap();
    assert_eq!(m.deform_scene(&opts(0.5, Stage::Soft)).unwrap(), gs);
}
