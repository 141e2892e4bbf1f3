mod common;

use std::path::Path;

use haif::deformation::{DeformConfig, Model, Stage};
use haif::harness::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
use haif::harness::config::{OrbitConfig, SyntheticSceneSpec, TrainConfig};
use haif::harness::dataset::{generate_dataset, Dataset, Split};
use haif::harness::eval;
use haif::harness::train::{self, FINAL_CHECKPOINT, LAST_GOOD_CHECKPOINT, LOG_FILE};
use haif::hierarchy::DensifyOutcome;
use haif::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

fn small_spec() -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        static_count: 40,
        dynamic_count: 16,
        frames: 8,
        width: 24,
        height: 24,
        camera: OrbitConfig {
            focal: 52.0,
            ..OrbitConfig::default()
        },
        ..SyntheticSceneSpec::default()
    }
}

fn dataset(spec: &SyntheticSceneSpec) -> (TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(spec, dir.path()).unwrap();
    let ds = Dataset::load(dir.path()).unwrap();
    (dir, ds)
}

fn small_config(iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        iterations,
        anchors: 8,
        model: DeformConfig {
            nets: common::tiny_nets(),
            ..DeformConfig::default()
        },
        ..TrainConfig::default()
    };
    cfg.densify.params.samples = 4;
    cfg
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn zero_iterations_checkpoint_is_the_initialization() {
    let (_d, ds) = dataset(&small_spec());
    let cfg = small_config(0);
    let out = tempfile::tempdir().unwrap();
    let outcome = train::train(&cfg, &ds, Some(out.path())).unwrap();
    assert!(outcome.log.is_empty());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = train::initial_model(&cfg, &ds, &mut rng).unwrap();
    let (loaded, meta) = load_checkpoint(out.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(meta.iteration, 0);
    for (id, block) in init.store.blocks() {
        let other = loaded.store.id(&block.name).unwrap();
        assert_eq!(loaded.store.value(other), init.store.value(id), "{}", block.name);
    }
    assert_eq!(loaded.levels[0].neighbors, init.levels[0].neighbors);
}

#[test]
fn loss_log_records_every_term() {
    let (_d, ds) = dataset(&small_spec());
    let cfg = small_config(20);
    let out = tempfile::tempdir().unwrap();
    let outcome = train::train(&cfg, &ds, Some(out.path())).unwrap();
    assert_eq!(outcome.log.len(), 20);
    let train_frames = ds.split(Split::Train);
    for (i, row) in outcome.log.iter().enumerate() {
        assert_eq!(row.iteration, i);
        assert!(train_frames.contains(&row.frame));
        assert!(row.total.is_finite() && row.parts.photo > 0.0);
        assert!(row.parts.sparsity > 0.0 && row.parts.entropy > 0.0);
        assert!(row.parts.cycle >= 0.0);
        assert_eq!(row.anchors[0], 8);
        assert_eq!(row.stage, train::stage_at(&cfg, i));
    }
    // One epoch visits every training frame once.
    let mut epoch: Vec<usize> = outcome.log[..train_frames.len()].iter().map(|r| r.frame).collect();
    epoch.sort_unstable();
    assert_eq!(epoch, train_frames);

    let csv = String::from_utf8(read(out.path().join(LOG_FILE))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,stage,frame,total,photometric,cycle,entropy,sparsity,anchors"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 20);
    let first: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(first.len(), 9);
    assert_eq!(first[1], "soft");
    let total: f64 = first[3].parse().unwrap();
    assert_eq!(total, outcome.log[0].total);
    assert!(out.path().join("config.toml").exists());
}

#[test]
fn seeded_runs_are_identical() {
    let (_d, ds) = dataset(&small_spec());
    let cfg = small_config(40);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = train::train(&cfg, &ds, Some(a.path())).unwrap();
    let rb = train::train(&cfg, &ds, Some(b.path())).unwrap();
    assert_eq!(ra.log, rb.log);
    assert_eq!(read(a.path().join(LOG_FILE)), read(b.path().join(LOG_FILE)));
    assert_eq!(
        read(a.path().join(FINAL_CHECKPOINT)),
        read(b.path().join(FINAL_CHECKPOINT))
    );

    let mut other = cfg.clone();
    other.seed += 1;
    let rc = train::train(&other, &ds, None).unwrap();
    assert_ne!(ra.log, rc.log);
}

#[test]
fn densification_in_the_loop_keeps_the_render() {
    let (_d, ds) = dataset(&small_spec());
    let mut cfg = small_config(50);
    // Keep every anchor moving in the hard stage and refine any anchor
    // with nonzero variance.
    cfg.model.hard_threshold = 0.01;
    cfg.densify.params.tau = 0.0;
    let outcome = train::train(&cfg, &ds, None).unwrap();
    assert_eq!(outcome.densify.len(), 2);
    for event in &outcome.densify {
        assert!(event.render_change <= 1e-6, "{event:?}");
    }
    assert!(matches!(outcome.densify[0].outcome, DensifyOutcome::Added { level: 1, .. }));
    let levels = outcome.log.last().unwrap().anchors.len();
    assert_eq!(levels, outcome.model.levels.len());
    assert!(levels >= 2);
    for row in &outcome.log {
        let before = cfg.densify_iterations().iter().filter(|&&it| it <= row.iteration).count();
        assert!(row.anchors.len() <= 1 + before);
    }
}

#[test]
fn evaluation_survives_a_checkpoint_round_trip() {
    let (_d, ds) = dataset(&small_spec());
    let cfg = small_config(30);
    let out = tempfile::tempdir().unwrap();
    let outcome = train::train(&cfg, &ds, Some(out.path())).unwrap();
    let obj = eval::checkpoint_objective(&outcome.meta, &ds);
    for split in [Split::Train, Split::Heldout] {
        let live = eval::evaluate_model(&outcome.model, &ds, split, &obj).unwrap();
        let saved = eval::evaluate(out.path().join(FINAL_CHECKPOINT), &ds, split).unwrap();
        assert_eq!(live, saved);
        let n = live.frames.len() as f64;
        let psnr = live.frames.iter().map(|f| f.psnr).sum::<f64>() / n;
        let ssim = live.frames.iter().map(|f| f.ssim).sum::<f64>() / n;
        assert!((live.mean_psnr - psnr).abs() < 1e-12);
        assert!((live.mean_ssim - ssim).abs() < 1e-12);
        assert_eq!(live.frames.len(), ds.split(split).len());
    }
}

#[test]
fn ground_truth_model_scores_perfectly_on_a_still_scene() {
    let mut spec = small_spec();
    spec.motion.amplitude = 0.0;
    spec.motion.rotation_deg = 0.0;
    let (_d, ds) = dataset(&spec);
    let truth = ds.scene().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let anchors: Vec<_> = truth.iter().step_by(7).map(|g| g.mu).collect();
    let model = Model::new(&truth, &anchors, DeformConfig::default(), &mut rng).unwrap();
    let cfg = TrainConfig::default();
    let meta = CheckpointMeta {
        iteration: 0,
        stage: Stage::Soft,
        train: cfg,
    };
    let obj = eval::checkpoint_objective(&meta, &ds);
    for split in [Split::Train, Split::Heldout] {
        let report = eval::evaluate_model(&model, &ds, split, &obj).unwrap();
        assert!(!report.frames.is_empty());
        for f in &report.frames {
            assert_eq!(f.psnr, 99.0);
            assert!((f.ssim - 1.0).abs() < 1e-12);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("truth.ckpt");
    save_checkpoint(&path, &model, &meta).unwrap();
    let report = eval::evaluate(&path, &ds, Split::Heldout).unwrap();
    assert_eq!(report.mean_psnr, 99.0);
    let text = report.to_text();
    assert!(text.starts_with("split heldout\n"));
    assert!(text.contains("mean psnr 99.0000"));
}

#[test]
fn divergence_leaves_the_last_good_checkpoint() {
    let (_d, ds) = dataset(&small_spec());
    let mut cfg = small_config(10);
    cfg.lr.sh = 1e300;
    let out = tempfile::tempdir().unwrap();
    let err = train::train(&cfg, &ds, Some(out.path())).unwrap_err();
    let Error::NonFinite { iteration, .. } = err else {
        panic!("expected a non-finite loss, got {err}");
    };
    assert!(iteration >= 1);
    let (model, meta) = load_checkpoint(out.path().join(LAST_GOOD_CHECKPOINT)).unwrap();
    assert_eq!(meta.iteration, iteration - 1);
    let sh = model.store.value(model.gaussians.sh);
    assert!(sh.iter().all(|v| v.is_finite()));
    assert!(out.path().join(LOG_FILE).exists());
    assert!(!out.path().join(FINAL_CHECKPOINT).exists());
}

#[test]
fn static_baseline_trains_only_gaussians() {
    let (_d, ds) = dataset(&small_spec());
    let mut cfg = small_config(15);
    cfg.deformation = false;
    let outcome = train::train(&cfg, &ds, None).unwrap();
    assert!(outcome.densify.is_empty());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = train::initial_model(&cfg, &ds, &mut rng).unwrap();
    for (id, block) in init.store.blocks() {
        let after = outcome.model.store.value(outcome.model.store.id(&block.name).unwrap());
        if block.name.starts_with("gaussians.") {
            assert_ne!(after, init.store.value(id), "{}", block.name);
        } else {
            assert_eq!(after, init.store.value(id), "{}", block.name);
        }
    }
    for row in &outcome.log {
        assert_eq!(row.total, row.parts.photo);
    }
}

#[test]
fn invalid_schedule_is_rejected_before_training() {
    let (_d, ds) = dataset(&small_spec());
    let mut cfg = small_config(10);
    cfg.stage_switch = 1.2;
    let out = tempfile::tempdir().unwrap();
    assert!(matches!(train::train(&cfg, &ds, Some(out.path())), Err(Error::Config(_))));
    assert!(!out.path().join("config.toml").exists());
}
