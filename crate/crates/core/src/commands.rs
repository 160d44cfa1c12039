//! The batch commands behind the `cyltpv` binary. Each reads a [`RunConfig`]
//! and writes its artifacts under `output_dir` (or `data_dir` for `gen`).

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::bench::{run_bench, BenchReport};
use crate::config::RunConfig;
use crate::dataset::{generate_dataset, DatasetManifest, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::eval::{eval_occ, eval_seg, OccReport, Predictor, SegReport};
use crate::geometry::GridSpec;
use crate::heads::OccupancyInference;
use crate::io::write_occupancy;
use crate::model::{Model, ModelConfig};
use crate::scene::{gen_synthetic_scene, SceneSpec, SensorSpec};
use crate::tensor::{GradCheckOptions, GradCheckReport};
use crate::train::{loss_gradcheck, train, Sample, StepLog, Task, TrainConfig};

pub const CHECKPOINT_FILE: &str = "model.tpvw";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EVAL_SEG_FILE: &str = "eval_seg.json";
pub const EVAL_OCC_FILE: &str = "eval_occ.json";
pub const PRED_DIR: &str = "pred";
pub const BENCH_FILE: &str = "bench.json";
pub const GRADCHECK_FILE: &str = "gradcheck.json";

pub fn default_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.output_dir.join(CHECKPOINT_FILE)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_data(cfg: &RunConfig) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest = DatasetManifest::read(&cfg.data_dir.join(MANIFEST_FILE))?;
    if manifest.num_classes != cfg.model.num_classes {
        return Err(Error::config(format!(
            "dataset has {} classes, model expects {}",
            manifest.num_classes, cfg.model.num_classes
        )));
    }
    let data = manifest.load(&cfg.data_dir)?;
    Ok((manifest, data))
}

/// Generates the synthetic dataset described by `cfg.gen` into `data_dir`.
pub fn cmd_gen(cfg: &RunConfig) -> Result<DatasetManifest> {
    let gen = cfg.gen.as_ref().ok_or_else(|| Error::config("missing `gen` section"))?;
    generate_dataset(gen, &cfg.data_dir)
}

/// Trains a freshly initialized model (seeded by `cfg.seed`) and writes the
/// checkpoint plus one JSON line per step to `train_log.jsonl`.
pub fn cmd_train(cfg: &RunConfig, checkpoint: &Path) -> Result<Vec<StepLog>> {
    let tcfg = cfg.train.as_ref().ok_or_else(|| Error::config("missing `train` section"))?;
    tcfg.validate()?;
    let mut model = Model::new(&cfg.model, cfg.seed)?;
    let (_, data) = load_data(cfg)?;
    create_dir(&cfg.output_dir)?;
    let log_path = cfg.output_dir.join(TRAIN_LOG_FILE);
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut write_err = None;
    let logs = train(&mut model, &data, tcfg, |s| {
        if write_err.is_none() {
            let line = serde_json::to_string(s).expect("step log serializes");
            if let Err(e) = writeln!(log, "{line}") {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(Error::io(&log_path, e));
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    if let Some(dir) = checkpoint.parent() {
        create_dir(dir)?;
    }
    model.save(checkpoint, cfg.precision)?;
    Ok(logs)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model> {
    Model::load(&cfg.model, checkpoint)
}

/// Point-segmentation evaluation; the checkpoint is only read for the model
/// predictor.
pub fn cmd_eval_seg(cfg: &RunConfig, checkpoint: &Path) -> Result<SegReport> {
    let (_, data) = load_data(cfg)?;
    let model = match cfg.eval.predictor {
        Predictor::Model => Some(load_model(cfg, checkpoint)?),
        _ => None,
    };
    let report = eval_seg(model.as_ref(), &data, cfg.model.num_classes, cfg.eval.predictor)?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(EVAL_SEG_FILE), &report)?;
    Ok(report)
}

/// Occupancy evaluation; also writes one predicted grid per scene to
/// `pred/scene_XXX.cocc`.
pub fn cmd_eval_occ(cfg: &RunConfig, checkpoint: &Path) -> Result<OccReport> {
    let (manifest, data) = load_data(cfg)?;
    let model = match cfg.eval.predictor {
        Predictor::Model => Some(load_model(cfg, checkpoint)?),
        _ => None,
    };
    let inf = OccupancyInference {
        coarse: manifest.grid.coarsen(cfg.eval.occ_factor)?,
        factor: cfg.eval.occ_factor,
        memory_cap: cfg.eval.memory_cap,
    };
    let (report, preds) = eval_occ(model.as_ref(), &data, cfg.model.num_classes, cfg.eval.predictor, &inf)?;
    let pred_dir = cfg.output_dir.join(PRED_DIR);
    create_dir(&pred_dir)?;
    for (i, p) in preds.iter().enumerate() {
        write_occupancy(p, &pred_dir.join(format!("scene_{i:03}.cocc")))?;
    }
    write_json(&cfg.output_dir.join(EVAL_OCC_FILE), &report)?;
    Ok(report)
}

/// Times one forward pass. Uses the checkpoint if it exists, otherwise a
/// seeded random initialization.
pub fn cmd_bench(cfg: &RunConfig, checkpoint: &Path) -> Result<BenchReport> {
    let model = if checkpoint.exists() {
        load_model(cfg, checkpoint)?
    } else {
        Model::new(&cfg.model, cfg.seed)?
    };
    let cloud = match &cfg.bench.scene {
        Some(spec) => gen_synthetic_scene(spec)?.0,
        None => load_data(cfg)?
            .1
            .into_iter()
            .next()
            .ok_or_else(|| Error::Data("bench needs a scene but the dataset is empty".into()))?
            .cloud,
    };
    let report = run_bench(&model, &cloud, cfg.bench.repeats, cfg.precision)?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(BENCH_FILE), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckSummary {
    pub tolerance: f64,
    pub passed: bool,
    pub parameters: usize,
    pub points: usize,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

/// A small scene inside the toy partition: sparse beams over a 16 m square.
pub fn gradcheck_scene(seed: u64) -> SceneSpec {
    let grid = GridSpec {
        dims: [20, 20, 6],
        origin: [-16.0, -16.0, -2.4],
        voxel_size: 1.6,
    };
    let mut spec = SceneSpec::urban(seed, grid);
    spec.sensor = SensorSpec {
        rays_per_ring: 24,
        elevations_deg: vec![-20.0, -12.0, -6.0, -2.0],
        ..spec.sensor
    };
    spec
}

/// Finite-difference check of the end-to-end segmentation and occupancy loss
/// of `cfg.model` at its seeded initialization.
pub fn run_gradcheck(model_cfg: &ModelConfig, seed: u64, cfg: &crate::config::GradcheckConfig) -> Result<GradcheckSummary> {
    let model = Model::new(model_cfg, seed)?;
    let spec = cfg.scene.clone().unwrap_or_else(|| gradcheck_scene(seed));
    let (cloud, occ) = gen_synthetic_scene(&spec)?;
    let task = if occ.spec.dims.iter().all(|d| d % 2 == 0) {
        Task::Both
    } else {
        Task::Lidarseg
    };
    let tcfg = TrainConfig {
        task,
        steps: 0,
        lr: 0.0,
        warmup_steps: 0,
        adam: Default::default(),
        batch_size: 1,
        freeze: Vec::new(),
        occ_factor: 2,
        lovasz_weight: 1.0,
    };
    let points = cloud.len();
    let sample = Sample {
        cloud,
        occupancy: Some(occ),
    };
    let opts = GradCheckOptions {
        h: cfg.step,
        max_coords_per_input: cfg.max_coords_per_tensor,
        denom_floor: cfg.denom_floor,
        kink_threshold: Some(cfg.kink_threshold),
        kink_refinements: cfg.kink_refinements,
        seed,
    };
    let report = loss_gradcheck(&model, &sample, &tcfg, &opts)?;
    Ok(GradcheckSummary {
        tolerance: cfg.tolerance,
        passed: report.max_rel_error < cfg.tolerance,
        parameters: model.store.num_values(true),
        points,
        report,
    })
}

impl GradcheckSummary {
    /// Verification error when the maximum relative error reaches the
    /// tolerance.
    pub fn check(&self) -> Result<()> {
        if self.passed {
            Ok(())
        } else {
            Err(Error::Verification(format!(
                "max relative gradient error {:e} is not below {:e}",
                self.report.max_rel_error, self.tolerance
            )))
        }
    }
}

/// Runs the gradient check and writes `gradcheck.json`, pass or fail.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradcheckSummary> {
    let summary = run_gradcheck(&cfg.model, cfg.seed, &cfg.gradcheck)?;
    create_dir(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(GRADCHECK_FILE), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::GradcheckConfig;

    #[test]
    fn toy_gradcheck_passes() {
        let t = std::time::Instant::now();
        let s = run_gradcheck(&ModelConfig::toy(6), 0, &GradcheckConfig::default()).unwrap();
        eprintln!("{:?} {:?} points {}", t.elapsed(), s.report, s.points);
        assert!(s.passed, "{s:?}");
    }
}
