//! Run configuration: a single JSON document driving every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::GenConfig;
use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::model::ModelConfig;
use crate::query::DEFAULT_MEMORY_CAP;
use crate::scene::SceneSpec;
use crate::tensor::Dtype;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_predictor")]
    pub predictor: Predictor,
    /// Occupancy logits are computed on the ground-truth grid coarsened by
    /// this factor and upsampled back.
    #[serde(default = "default_occ_factor")]
    pub occ_factor: usize,
    #[serde(default = "default_cap")]
    pub memory_cap: usize,
}

fn default_predictor() -> Predictor {
    Predictor::Model
}

fn default_occ_factor() -> usize {
    2
}

fn default_cap() -> usize {
    DEFAULT_MEMORY_CAP
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            predictor: default_predictor(),
            occ_factor: default_occ_factor(),
            memory_cap: default_cap(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Scene to time; the first dataset scene when absent.
    #[serde(default)]
    pub scene: Option<SceneSpec>,
}

fn default_repeats() -> usize {
    3
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            repeats: default_repeats(),
            scene: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckConfig {
    /// Fails when the maximum relative error reaches this value.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_coords")]
    pub max_coords_per_tensor: Option<usize>,
    #[serde(default = "default_step")]
    pub step: f64,
    /// Gradients smaller than this are compared in absolute terms.
    #[serde(default = "default_floor")]
    pub denom_floor: f64,
    /// Relative disagreement between difference stencils that marks a kink.
    #[serde(default = "default_kink")]
    pub kink_threshold: f64,
    #[serde(default = "default_refinements")]
    pub kink_refinements: usize,
    /// Scene the loss is evaluated on; a small built-in sweep when absent.
    #[serde(default)]
    pub scene: Option<SceneSpec>,
}

fn default_tolerance() -> f64 {
    1e-4
}

fn default_coords() -> Option<usize> {
    Some(6)
}

fn default_step() -> f64 {
    1e-5
}

fn default_floor() -> f64 {
    1e-4
}

fn default_kink() -> f64 {
    1e-4
}

fn default_refinements() -> usize {
    2
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            tolerance: default_tolerance(),
            max_coords_per_tensor: default_coords(),
            step: default_step(),
            denom_floor: default_floor(),
            kink_threshold: default_kink(),
            kink_refinements: default_refinements(),
            scene: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Storage precision of checkpoints and bench byte counts. Compute is
    /// always double precision.
    #[serde(default = "default_precision")]
    pub precision: Dtype,
    #[serde(default)]
    pub threads: Option<usize>,
    pub model: ModelConfig,
    /// Directory holding `manifest.json`.
    pub data_dir: PathBuf,
    /// Checkpoints, logs, reports and predictions go here.
    pub output_dir: PathBuf,
    #[serde(default)]
    pub gen: Option<GenConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub bench: BenchConfig,
    #[serde(default)]
    pub gradcheck: GradcheckConfig,
}

fn default_precision() -> Dtype {
    Dtype::F64
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads a config and resolves its relative paths against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data_dir, &mut cfg.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let Some(g) = &self.gen {
            g.scene.validate()?;
            g.partition.validate()?;
            if g.class_names.len() != self.model.num_classes {
                return Err(Error::config(format!(
                    "gen lists {} classes, model expects {}",
                    g.class_names.len(),
                    self.model.num_classes
                )));
            }
        }
        if self.eval.occ_factor == 0 {
            return Err(Error::config("eval occupancy factor must be positive"));
        }
        if self.threads == Some(0) {
            return Err(Error::config("threads must be positive"));
        }
        let gc = &self.gradcheck;
        if ![gc.tolerance, gc.step, gc.denom_floor, gc.kink_threshold].iter().all(|v| v.is_finite() && *v > 0.0) {
            return Err(Error::config("gradcheck tolerance, step, floor and kink threshold must be positive"));
        }
        Ok(())
    }
}
