//! The `sweepfuse` command line. [`run`] parses arguments, applies
//! configuration overrides and maps failures to exit codes.

pub mod args;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Serialize;
use sweepfuse_core::fusion::evaluate;
use sweepfuse_core::gradcheck::{run_suite, GRADCHECK_TOLERANCE};
use sweepfuse_core::io::{self, pfm, ply};
use sweepfuse_core::pipeline::{depth_grid_camera, DepthEstimate};
use sweepfuse_core::pyramid::PyramidLevel;
use sweepfuse_core::reconstruct::{estimate_view, fuse_level, refine_scene};
use sweepfuse_core::synthetic::{make_dataset, ViewLayout};
use sweepfuse_core::train::{train, Dataset, SceneData};
use sweepfuse_core::{Error, Model, Result, RunConfig};
use sweepfuse_tensor::checkpoint;

use args::{Cli, Command, DepthArgs, EvalArgs, FuseArgs, GradcheckArgs, Overrides, PyramidArgs, SynthArgs, TrainArgs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

/// Overrides the configured seed when set.
pub const SEED_ENV: &str = "SWEEPFUSE_SEED";

pub const REPORT_FILE: &str = "report.json";

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_io() {
        EXIT_IO
    } else {
        EXIT_VALIDATION
    }
}

/// Layers `--config`, the flags and the seed variable, then validates.
pub fn resolve_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => at(p, RunConfig::load(p))?,
        None => RunConfig::default(),
    };
    if let Some(v) = o.seed {
        cfg.seed = v;
    }
    if let Some(v) = &o.mode {
        cfg.mode = v.clone();
    }
    if let Some(v) = &o.checkpoint {
        cfg.checkpoint = Some(v.clone());
    }
    if let Some(v) = o.depth_min {
        cfg.depth.d_min = v;
    }
    if let Some(v) = o.depth_max {
        cfg.depth.d_max = v;
    }
    if let Some(v) = o.depth_count {
        cfg.depth.count = v;
    }
    if let Some(v) = o.views_test {
        cfg.views_test = v;
    }
    if let Some(v) = o.views_train {
        cfg.views_train = v;
    }
    if let Some(v) = o.levels {
        cfg.pyramid.levels = v;
    }
    if let Some(v) = o.fusion_confidence {
        cfg.fusion_confidence = v;
    }
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.seed =
            s.trim().parse().map_err(|_| Error::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
    }
    cfg.validate()?;
    cfg.registry::<f32>().get(&cfg.mode)?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.global)?;
    match cli.global.jobs {
        Some(0) => Err(Error::Config("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?
            .install(|| dispatch(cli.command, &cfg)),
        None => dispatch(cli.command, &cfg),
    }
}

fn dispatch(command: Command, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, cfg),
        Command::Depth(a) => depth(a, cfg),
        Command::Pyramid(a) => pyramid(a, cfg),
        Command::Fuse(a) => fuse(a, cfg),
        Command::Eval(a) => eval(a, cfg),
        Command::Train(a) => train_cmd(a, cfg),
        Command::Gradcheck(a) => gradcheck(a, cfg),
        Command::Summary => summary(cfg),
    }
}

/// Seeded weights, replaced by the configured checkpoint when there is one.
pub fn load_model(cfg: &RunConfig) -> Result<Model<f32>> {
    let mut model = Model::new(cfg.seed)?;
    if let Some(p) = &cfg.checkpoint {
        at(p, checkpoint::load(&mut model.store, p).map_err(Error::from))?;
    } else if cfg.registry::<f32>().get(&cfg.mode)?.trainable() {
        eprintln!("warning: no --checkpoint given, mode {} runs with untrained weights", cfg.mode);
    }
    Ok(model)
}

/// Names the path in I/O failures, which otherwise only carry the OS message.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn load_scene(dir: &Path) -> Result<SceneData> {
    at(dir, SceneData::load(dir))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    text.push('\n');
    io::write_file(path, text.as_bytes())
}

pub fn depth_file(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("{view:04}.pfm"))
}

pub fn confidence_file(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("{view:04}_conf.pfm"))
}

pub fn refined_file(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("{view:04}_refined.pfm"))
}

pub fn refined_confidence_file(dir: &Path, view: usize) -> PathBuf {
    dir.join(format!("{view:04}_refined_conf.pfm"))
}

fn synth(a: SynthArgs, cfg: &RunConfig) -> Result<()> {
    let layout = ViewLayout { views: a.views, width: a.width, height: a.height };
    for dir in make_dataset(&a.out, a.scenes, layout, a.kind.into(), cfg.seed, cfg.depth)? {
        println!("{}", dir.display());
    }
    Ok(())
}

fn depth(a: DepthArgs, cfg: &RunConfig) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let registry = cfg.registry::<f32>();
    let model = load_model(cfg)?;
    let est =
        estimate_view(registry.get(&cfg.mode)?, &model, &scene.views, a.reference, cfg.views_test, &cfg.depth, 0)?;
    let out = a.out.unwrap_or_else(|| a.scene.join("depth"));
    pfm::write(&depth_file(&out, a.reference), &est.depth)?;
    pfm::write(&confidence_file(&out, a.reference), &est.confidence)?;
    println!("{}", depth_file(&out, a.reference).display());
    Ok(())
}

fn pyramid(a: PyramidArgs, cfg: &RunConfig) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let registry = cfg.registry::<f32>();
    let model = load_model(cfg)?;
    let (refined, report) = refine_scene(
        registry.get(&cfg.mode)?,
        &model,
        &scene.views,
        cfg.views_test,
        &cfg.depth,
        &cfg.pyramid,
        &cfg.multi_metric,
    )?;
    let out = a.out.unwrap_or_else(|| a.scene.join("pyramid"));
    for (v, est) in refined.estimates.iter().enumerate() {
        pfm::write(&refined_file(&out, v), &est.depth)?;
        pfm::write(&refined_confidence_file(&out, v), &est.confidence)?;
    }
    write_json(&out.join(REPORT_FILE), &report)?;
    for l in &report.levels {
        println!("level {}: {} pixels replaced", l.level, l.replaced_total);
    }
    println!("{}", out.display());
    Ok(())
}

fn fuse(a: FuseArgs, cfg: &RunConfig) -> Result<()> {
    let scene = load_scene(&a.scene)?;
    let dir = a.depth.unwrap_or_else(|| a.scene.join("pyramid"));
    let mut level = PyramidLevel { estimates: Vec::new(), cameras: Vec::new() };
    for (v, view) in scene.views.iter().enumerate() {
        let depth = at(&dir, pfm::read(&refined_file(&dir, v)))?;
        let confidence = at(&dir, pfm::read(&refined_confidence_file(&dir, v)))?;
        let camera = depth_grid_camera(&view.camera)?;
        if !depth.same_extent(&confidence) || depth.width != camera.width || depth.height != camera.height {
            return Err(Error::Config(format!(
                "view {v}: refined maps are {}×{} and {}×{}, depth grid is {}×{}",
                depth.width, depth.height, confidence.width, confidence.height, camera.width, camera.height
            )));
        }
        level.estimates.push(DepthEstimate { depth, confidence, level: 0 });
        level.cameras.push(camera);
    }
    let images: Vec<_> = scene.views.iter().map(|v| v.image.clone()).collect();
    let cloud = fuse_level(&level, &images, cfg.fusion_confidence, &cfg.multi_metric)?;
    let out = a.out.unwrap_or_else(|| a.scene.join("fused.ply"));
    ply::write(&out, &cloud)?;
    println!("{} points -> {}", cloud.len(), out.display());
    Ok(())
}

fn eval(a: EvalArgs, cfg: &RunConfig) -> Result<()> {
    let pred_path = a.pred.unwrap_or_else(|| a.scene.join("fused.ply"));
    let gt_path = a.gt.unwrap_or_else(|| a.scene.join("gt_cloud.ply"));
    let pred = at(&pred_path, ply::read(&pred_path))?;
    let gt = at(&gt_path, ply::read(&gt_path))?;
    let threshold = a.threshold.unwrap_or(cfg.eval_threshold);
    if !(threshold > 0.0 && threshold.is_finite()) {
        return Err(Error::Config(format!("evaluation threshold must be positive, got {threshold}")));
    }
    let e = evaluate(&pred, &gt, threshold)?;
    write_json(&a.out.unwrap_or_else(|| a.scene.join("eval.json")), &e)?;
    println!("{}", serde_json::to_string(&e).map_err(Error::from)?);
    Ok(())
}

fn train_cmd(a: TrainArgs, cfg: &RunConfig) -> Result<()> {
    let mut cfg = cfg.clone();
    let t = &mut cfg.train;
    t.lr = a.lr.unwrap_or(t.lr);
    t.epochs = a.epochs.unwrap_or(t.epochs);
    t.batch = a.batch.unwrap_or(t.batch);
    t.val_scenes = a.val_scenes.unwrap_or(t.val_scenes);
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    cfg.validate()?;
    let data = at(&a.data, Dataset::load(&a.data, &cfg))?;
    let mut model = load_model(&cfg)?;
    let outcome = train(&cfg, &data, &mut model, &a.out, a.resume)?;
    write_json(&a.out.join("outcome.json"), &outcome)?;
    println!(
        "{} steps: train loss {:.4} -> {:.4}, validation error {:.4} -> {:.4}",
        outcome.steps,
        outcome.initial_train_loss,
        outcome.final_train_loss,
        outcome.initial_val_error,
        outcome.final_val_error
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs, cfg: &RunConfig) -> Result<()> {
    let results = run_suite(cfg.seed)?;
    let failed = results.iter().filter(|r| !r.passed()).count();
    for r in &results {
        println!(
            "{} {:<40} {:>5} entries  max rel {:.3e}",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.checked,
            r.max_rel_error
        );
    }
    if let Some(p) = &a.out {
        write_json(p, &results)?;
    }
    if failed > 0 {
        return Err(Error::Contract(format!(
            "{failed} of {} checks exceed relative error {GRADCHECK_TOLERANCE:e}",
            results.len()
        )));
    }
    println!("{} checks passed", results.len());
    Ok(())
}

fn summary(cfg: &RunConfig) -> Result<()> {
    let model = Model::<f32>::new(cfg.seed)?;
    let rows = model.summary();
    for r in &rows {
        println!("{:<40} {:<20} {:>8}", r.name, format!("{:?}", r.shape), r.count);
    }
    println!("total {}", rows.iter().map(|r| r.count).sum::<usize>());
    Ok(())
}
