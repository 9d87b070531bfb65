//! Supervised training on synthetic scenes: L1 between the soft-argmin depth
//! and area-averaged ground truth on the depth-map grid.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sweepfuse_tensor::{checkpoint, Adam, ParamId, Tape, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{Camera, DepthRange};
use crate::io;
use crate::maps::Map;
use crate::networks::Model;
use crate::pipeline::depth::{l1_loss, l1_loss_var};
use crate::pipeline::{estimate_depth, forward, MatchingStrategy, View, FEATURE_STRIDE};
use crate::synthetic::{camera_path, gt_depth_path, image_path, Manifest};

/// One scene read back from disk.
#[derive(Clone, Debug)]
pub struct SceneData {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub views: Vec<View>,
    /// Full-resolution ground-truth depth, 0 where nothing was hit.
    pub gt_depth: Vec<Map>,
}

impl SceneData {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join("scene.json"))?)?;
        let [w, h] = manifest.image_size;
        let mut views = Vec::with_capacity(manifest.views);
        let mut gt_depth = Vec::with_capacity(manifest.views);
        for v in 0..manifest.views {
            let image = io::image::read(&image_path(dir, v))?;
            if image.width != w || image.height != h {
                return Err(Error::config(format!(
                    "{}: image {v} is {}×{}, manifest says {w}×{h}",
                    dir.display(),
                    image.width,
                    image.height
                )));
            }
            let camera = io::camera::read(&camera_path(dir, v))?.camera(w, h)?;
            let gt = io::pfm::read(&gt_depth_path(dir, v))?;
            if gt.width != w || gt.height != h {
                return Err(Error::config(format!("{}: ground truth {v} has the wrong size", dir.display())));
            }
            views.push(View { image, camera });
            gt_depth.push(gt);
        }
        Ok(Self { dir: dir.to_path_buf(), manifest, views, gt_depth })
    }

    /// `reference` followed by its `count` nearest views by camera centre.
    pub fn views_for(&self, reference: usize, count: usize) -> Result<Vec<View>> {
        let cams: Vec<Camera> = self.views.iter().map(|v| v.camera.clone()).collect();
        Ok(select_sources(&cams, reference, count)?.into_iter().map(|i| self.views[i].clone()).collect())
    }
}

/// Indices of `reference` and the `count − 1` other cameras whose centres
/// are closest to it, nearest first (lower index on ties).
pub fn select_sources(cameras: &[Camera], reference: usize, count: usize) -> Result<Vec<usize>> {
    if reference >= cameras.len() {
        return Err(Error::config(format!("reference view {reference} out of {} views", cameras.len())));
    }
    if count < 2 || count > cameras.len() {
        return Err(Error::config(format!("cannot pick {count} views from a scene with {} views", cameras.len())));
    }
    let c = cameras[reference].center();
    let mut others: Vec<(f64, usize)> =
        (0..cameras.len()).filter(|&i| i != reference).map(|i| ((cameras[i].center() - c).norm(), i)).collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = vec![reference];
    out.extend(others.into_iter().take(count - 1).map(|(_, i)| i));
    Ok(out)
}

/// Ground truth on the depth-map grid: area average of each
/// `FEATURE_STRIDE × FEATURE_STRIDE` block, valid only where every covered
/// pixel hit a surface.
pub fn quarter_ground_truth(depth: &Map) -> Result<(Map, Vec<bool>)> {
    let s = FEATURE_STRIDE;
    let (w, h) = (depth.width / s, depth.height / s);
    let avg = depth.area_resample(1.0 / s as f64, w, h)?;
    let valid = (0..w * h)
        .map(|i| {
            let (x, y) = (i % w, i / w);
            (0..s).all(|dy| (0..s).all(|dx| depth.get(s * x + dx, s * y + dy) > 0.0))
        })
        .collect();
    Ok((avg, valid))
}

/// One reference view with its sources and target.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene: usize,
    pub reference: usize,
    pub views: Vec<View>,
    pub gt: Map,
    pub valid: Vec<bool>,
}

/// Training and validation samples from a directory of scenes.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    /// Every `scene_*` directory under `root`, in name order. The last
    /// `cfg.train.val_scenes` scenes are held out; every view of a scene
    /// serves once as reference.
    pub fn load(root: &Path, cfg: &RunConfig) -> Result<Self> {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("scene_")))
            .collect();
        dirs.sort();
        if dirs.len() <= cfg.train.val_scenes {
            return Err(Error::config(format!(
                "{} holds {} scenes; need more than the {} held out for validation",
                root.display(),
                dirs.len(),
                cfg.train.val_scenes
            )));
        }
        let split = dirs.len() - cfg.train.val_scenes;
        let mut train = Vec::new();
        let mut val = Vec::new();
        for (i, dir) in dirs.iter().enumerate() {
            let scene = SceneData::load(dir)?;
            check_scene(&scene, cfg)?;
            for r in 0..scene.views.len() {
                let (gt, valid) = quarter_ground_truth(&scene.gt_depth[r])?;
                let sample = Sample { scene: i, reference: r, views: scene.views_for(r, cfg.views_train)?, gt, valid };
                if i < split {
                    train.push(sample);
                } else {
                    val.push(sample);
                }
            }
        }
        Ok(Self { train, val })
    }
}

fn check_scene(scene: &SceneData, cfg: &RunConfig) -> Result<()> {
    let m = &scene.manifest;
    if m.views < cfg.views_train {
        return Err(Error::config(format!(
            "{}: {} views, but training uses {}",
            scene.dir.display(),
            m.views,
            cfg.views_train
        )));
    }
    if m.depth_range.d_min < cfg.depth.d_min || m.depth_range.d_max > cfg.depth.d_max {
        return Err(Error::config(format!(
            "{}: scene depth range {}–{} mm exceeds the configured {}–{} mm",
            scene.dir.display(),
            m.depth_range.d_min,
            m.depth_range.d_max,
            cfg.depth.d_min,
            cfg.depth.d_max
        )));
    }
    Ok(())
}

/// Mean over samples of the L1 depth error of single-precision estimates.
pub fn mean_depth_error(
    strategy: &dyn MatchingStrategy<f32>,
    model: &Model<f32>,
    samples: &[Sample],
    range: &DepthRange,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("no samples to evaluate"));
    }
    let mut total = 0.0;
    for s in samples {
        let est = estimate_depth(strategy, model, &s.views, range, 0)?;
        total += l1_loss(&est.depth, &s.gt, &s.valid)?;
    }
    Ok(total / samples.len() as f64)
}

/// Optimizer and schedule position, written after every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs fully completed.
    pub epochs_done: usize,
    pub global_step: usize,
    pub adam_step: u64,
    /// Relative to the run directory.
    pub checkpoint: PathBuf,
    pub moments: PathBuf,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    /// Loss of this step, or the mean step loss of the epoch on epoch lines.
    pub loss: f64,
    /// Present on epoch lines (and the initial line at step 0).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    /// Mean training-set loss before the first and after the last step.
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
    pub initial_val_error: f64,
    pub final_val_error: f64,
    pub steps: usize,
    pub step_losses: Vec<f64>,
}

pub const STATE_FILE: &str = "state.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "model.swft";

fn epoch_checkpoint(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("epoch_{epoch:04}.swft"))
}

fn save_moments(model: &Model<f32>, path: &Path) -> Result<()> {
    let tensors: Vec<(String, Tensor<f32>)> = model
        .store
        .iter()
        .flat_map(|p| {
            let shape = p.value.shape().to_vec();
            [
                (format!("m/{}", p.name), Tensor::new(shape.clone(), p.adam_m.clone())),
                (format!("v/{}", p.name), Tensor::new(shape, p.adam_v.clone())),
            ]
        })
        .map(|(n, t)| t.map(|t| (n, t)))
        .collect::<Result<_, _>>()?;
    let entries: Vec<(&str, &Tensor<f32>)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut out = BufWriter::new(File::create(path)?);
    checkpoint::write_entries(&mut out, &entries)?;
    out.flush()?;
    Ok(())
}

fn load_moments(model: &mut Model<f32>, path: &Path) -> Result<()> {
    let entries = checkpoint::read_entries(&mut BufReader::new(File::open(path)?))?;
    let mut seen = 0;
    for (name, t) in entries {
        let (kind, pname) = name.split_once('/').ok_or_else(|| Error::config(format!("bad moment entry {name:?}")))?;
        let id =
            model.store.id(pname).ok_or_else(|| Error::config(format!("moment for unknown parameter {pname:?}")))?;
        let p = model.store.get_mut(id);
        if t.shape() != p.value.shape() {
            return Err(Error::config(format!("moment {name:?} has the wrong shape")));
        }
        match kind {
            "m" => p.adam_m = t.data().to_vec(),
            "v" => p.adam_v = t.data().to_vec(),
            _ => return Err(Error::config(format!("bad moment entry {name:?}"))),
        }
        seen += 1;
    }
    if seen != 2 * model.store.len() {
        return Err(Error::config("moment file does not cover every parameter"));
    }
    Ok(())
}

fn append_metrics(path: &Path, record: &MetricsRecord) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

/// Loss of one sample on a fresh tape, with gradients accumulated into the
/// model's parameter store.
pub fn sample_step(
    strategy: &dyn MatchingStrategy<f32>,
    model: &mut Model<f32>,
    sample: &Sample,
    range: &DepthRange,
) -> Result<f64> {
    let mut tape = Tape::new();
    let fwd = forward(&mut tape, strategy, model, &sample.views, range)?;
    let loss = l1_loss_var(&mut tape, fwd.depth, &sample.gt, &sample.valid)?;
    let value = tape.value(loss).data()[0] as f64;
    tape.backward(loss)?;
    model.store.accumulate(&tape);
    Ok(value)
}

/// Trains `model` on `data.train`, writing per-epoch checkpoints, Adam
/// moments, `state.json` and `metrics.jsonl` into `out`. With `resume`, the
/// latest state in `out` is restored first and training continues with the
/// next epoch.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
    model: &mut Model<f32>,
    out: &Path,
    resume: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let registry = cfg.registry::<f32>();
    let strategy = registry.get(&cfg.mode)?;
    if !strategy.trainable() {
        return Err(Error::config(format!("mode {:?} has nothing to train", cfg.mode)));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::config("training needs both training and validation samples"));
    }
    std::fs::create_dir_all(out)?;
    let range = cfg.depth;
    let tc = &cfg.train;
    let metrics = out.join(METRICS_FILE);

    let mut adam = Adam::new(tc.lr);
    let mut start_epoch = 0;
    let mut global_step = 0;
    if resume {
        let state: TrainState = serde_json::from_slice(&std::fs::read(out.join(STATE_FILE))?)?;
        checkpoint::load(&mut model.store, &out.join(&state.checkpoint))?;
        load_moments(model, &out.join(&state.moments))?;
        adam.step = state.adam_step;
        start_epoch = state.epochs_done;
        global_step = state.global_step;
    } else if metrics.exists() {
        std::fs::remove_file(&metrics)?;
    }

    let initial_train_loss = mean_depth_error(strategy, model, &data.train, &range)?;
    let initial_val_error = mean_depth_error(strategy, model, &data.val, &range)?;
    if !resume {
        append_metrics(
            &metrics,
            &MetricsRecord {
                epoch: 0,
                step: 0,
                loss: initial_train_loss,
                val_error: Some(initial_val_error),
                lr: None,
            },
        )?;
    }

    let limit = tc.max_steps.unwrap_or(usize::MAX);
    let mut step_losses = Vec::new();
    let mut final_val_error = initial_val_error;
    for epoch in start_epoch..tc.epochs {
        if global_step >= limit {
            break;
        }
        adam.lr = tc.lr * tc.decay.powi(epoch as i32);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
        let mut epoch_losses = Vec::new();
        for batch in order.chunks(tc.batch) {
            if global_step >= limit {
                break;
            }
            model.store.zero_grad();
            let mut loss = 0.0;
            for &i in batch {
                loss += sample_step(strategy, model, &data.train[i], &range)?;
            }
            loss /= batch.len() as f64;
            let ids: Vec<ParamId> = model.store.ids().filter(|&id| model.store.get(id).grad.is_some()).collect();
            adam.step(&mut model.store, &ids)?;
            global_step += 1;
            epoch_losses.push(loss);
            step_losses.push(loss);
            append_metrics(
                &metrics,
                &MetricsRecord { epoch: epoch + 1, step: global_step, loss, val_error: None, lr: Some(adam.lr) },
            )?;
        }
        final_val_error = mean_depth_error(strategy, model, &data.val, &range)?;
        let mean_loss = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        append_metrics(
            &metrics,
            &MetricsRecord {
                epoch: epoch + 1,
                step: global_step,
                loss: mean_loss,
                val_error: Some(final_val_error),
                lr: None,
            },
        )?;
        let ckpt = epoch_checkpoint(out, epoch + 1);
        let moments = ckpt.with_extension("adam");
        checkpoint::save(&model.store, &ckpt)?;
        save_moments(model, &moments)?;
        let state = TrainState {
            epochs_done: epoch + 1,
            global_step,
            adam_step: adam.step,
            checkpoint: ckpt.strip_prefix(out).unwrap_or(&ckpt).to_path_buf(),
            moments: moments.strip_prefix(out).unwrap_or(&moments).to_path_buf(),
        };
        io::write_file(&out.join(STATE_FILE), serde_json::to_string_pretty(&state)?.as_bytes())?;
    }
    checkpoint::save(&model.store, &out.join(FINAL_CHECKPOINT))?;
    let final_train_loss = mean_depth_error(strategy, model, &data.train, &range)?;
    Ok(TrainOutcome {
        initial_train_loss,
        final_train_loss,
        initial_val_error,
        final_val_error,
        steps: step_losses.len(),
        step_losses,
    })
}
