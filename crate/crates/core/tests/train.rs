use std::path::Path;

use sweepfuse_core::networks::Model;
use sweepfuse_core::synthetic::{make_dataset, SceneKind, ViewLayout};
use sweepfuse_core::train::{
    quarter_ground_truth, select_sources, train, Dataset, MetricsRecord, TrainState, FINAL_CHECKPOINT, METRICS_FILE,
    STATE_FILE,
};
use sweepfuse_core::{DepthRange, Error, Map, RunConfig};

const LAYOUT: ViewLayout = ViewLayout { views: 3, width: 32, height: 32 };

fn config() -> RunConfig {
    let mut cfg = RunConfig {
        views_train: 3,
        depth: DepthRange::new(425.0, 935.0, 8).unwrap(),
        mode: "voxelwise".into(),
        ..Default::default()
    };
    cfg.train.epochs = 2;
    cfg.train.batch = 2;
    cfg.train.val_scenes = 1;
    cfg
}

fn dataset(root: &Path) -> Dataset {
    make_dataset(root, 3, LAYOUT, SceneKind::PlaneAndBox, 11, config().depth).unwrap();
    Dataset::load(root, &config()).unwrap()
}

fn values(m: &Model<f32>) -> Vec<Vec<u32>> {
    m.store.iter().map(|p| p.value.data().iter().map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn dataset_split_and_samples() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    assert_eq!(data.train.len(), 2 * 3);
    assert_eq!(data.val.len(), 3);
    for s in data.train.iter().chain(&data.val) {
        assert_eq!(s.views.len(), 3);
        assert_eq!((s.gt.width, s.gt.height), (8, 8));
        assert!(s.valid.iter().all(|&v| v));
    }
    assert!(data.val.iter().all(|s| s.scene == 2));
}

#[test]
fn dataset_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    make_dataset(dir.path(), 2, LAYOUT, SceneKind::PlaneAndBox, 3, config().depth).unwrap();
    let mut narrow = config();
    narrow.depth = DepthRange::new(500.0, 935.0, 8).unwrap();
    assert!(matches!(Dataset::load(dir.path(), &narrow), Err(Error::Config(_))));
    let mut many = config();
    many.views_train = 5;
    assert!(matches!(Dataset::load(dir.path(), &many), Err(Error::Config(_))));
    let mut all_val = config();
    all_val.train.val_scenes = 2;
    assert!(matches!(Dataset::load(dir.path(), &all_val), Err(Error::Config(_))));
}

#[test]
fn sources_are_the_nearest_cameras() {
    let cams = ViewLayout { views: 5, width: 32, height: 32 }.cameras().unwrap();
    // Arc order: 0 at the centre, 1/2 at ±8°, 3/4 at ±16°.
    assert_eq!(select_sources(&cams, 0, 3).unwrap(), vec![0, 1, 2]);
    assert_eq!(select_sources(&cams, 3, 3).unwrap(), vec![3, 1, 0]);
    assert_eq!(select_sources(&cams, 4, 5).unwrap(), vec![4, 2, 0, 1, 3]);
    assert!(select_sources(&cams, 5, 2).is_err());
    assert!(select_sources(&cams, 0, 6).is_err());
}

#[test]
fn quarter_truth_averages_full_blocks() {
    let mut depth = Map::from_fn(8, 8, |x, y| 500.0 + (x + 8 * y) as f32);
    depth.set(5, 6, 0.0);
    let (gt, valid) = quarter_ground_truth(&depth).unwrap();
    assert_eq!((gt.width, gt.height), (2, 2));
    assert_eq!(valid, vec![true, true, true, false]);
    // Block (0, 0): mean of x in 0..4, y in 0..4.
    assert_eq!(gt.get(0, 0), 500.0 + 1.5 + 8.0 * 1.5);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&dir.path().join("data"));
    let mut cfg = config();
    cfg.train.lr = 0.0;
    cfg.train.epochs = 1;
    let mut model = Model::<f32>::new(1).unwrap();
    let before = values(&model);
    let out = train(&cfg, &data, &mut model, &dir.path().join("run"), false).unwrap();
    assert_eq!(out.steps, 3);
    assert_eq!(values(&model), before);
    assert_eq!(out.initial_train_loss, out.final_train_loss);
}

#[test]
fn training_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&dir.path().join("data"));
    let run = dir.path().join("run");
    let mut model = Model::<f32>::new(2).unwrap();
    let out = train(&config(), &data, &mut model, &run, false).unwrap();
    assert_eq!(out.steps, 6);
    assert_eq!(out.step_losses.len(), 6);
    let lines: Vec<MetricsRecord> = std::fs::read_to_string(run.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // Step 0, then every step and an epoch summary per epoch.
    assert_eq!(lines.len(), 1 + 6 + 2);
    assert_eq!(lines[0].step, 0);
    assert_eq!(lines[0].val_error, Some(out.initial_val_error));
    assert_eq!(lines[1].lr, Some(0.001));
    assert!((lines[5].lr.unwrap() - 0.0009).abs() < 1e-12);
    assert_eq!(lines.last().unwrap().val_error, Some(out.final_val_error));
    for f in ["epoch_0001.swft", "epoch_0001.adam", "epoch_0002.swft", FINAL_CHECKPOINT, STATE_FILE] {
        assert!(run.join(f).exists(), "{f}");
    }
    let state: TrainState = serde_json::from_slice(&std::fs::read(run.join(STATE_FILE)).unwrap()).unwrap();
    assert_eq!((state.epochs_done, state.global_step, state.adam_step), (2, 6, 6));
}

#[test]
fn max_steps_stops_early() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&dir.path().join("data"));
    let mut cfg = config();
    cfg.train.max_steps = Some(4);
    let mut model = Model::<f32>::new(3).unwrap();
    assert_eq!(train(&cfg, &data, &mut model, &dir.path().join("run"), false).unwrap().steps, 4);
}

#[test]
fn resumed_training_is_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&dir.path().join("data"));
    let straight = dir.path().join("straight");
    let mut a = Model::<f32>::new(4).unwrap();
    train(&config(), &data, &mut a, &straight, false).unwrap();

    let split = dir.path().join("split");
    let mut first = config();
    first.train.epochs = 1;
    let mut b = Model::<f32>::new(4).unwrap();
    train(&first, &data, &mut b, &split, false).unwrap();
    let mut c = Model::<f32>::new(99).unwrap();
    let out = train(&config(), &data, &mut c, &split, true).unwrap();
    assert_eq!(out.steps, 3);
    assert_eq!(values(&a), values(&c));
    assert_eq!(
        std::fs::read(straight.join(FINAL_CHECKPOINT)).unwrap(),
        std::fs::read(split.join(FINAL_CHECKPOINT)).unwrap()
    );
    assert_eq!(
        std::fs::read(straight.join("epoch_0002.adam")).unwrap(),
        std::fs::read(split.join("epoch_0002.adam")).unwrap()
    );
}

#[test]
fn untrainable_mode_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&dir.path().join("data"));
    let mut cfg = config();
    cfg.mode = "photometric".into();
    let mut model = Model::<f32>::new(5).unwrap();
    assert!(matches!(train(&cfg, &data, &mut model, &dir.path().join("run"), false), Err(Error::Config(_))));
    cfg.mode = "nope".into();
    assert!(matches!(train(&cfg, &data, &mut model, &dir.path().join("run"), false), Err(Error::Config(_))));
}

#[test]
fn missing_state_on_resume_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(&dir.path().join("data"));
    let mut model = Model::<f32>::new(6).unwrap();
    let err = train(&config(), &data, &mut model, &dir.path().join("fresh"), true).unwrap_err();
    assert!(err.is_io(), "{err:?}");
}
