//! Dataset manifests and synthetic dataset generation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, PartitionConfig};
use crate::io::{read_occupancy, read_point_cloud, write_occupancy, write_point_cloud};
use crate::scene::{gen_synthetic_scene, SceneSpec};
use crate::train::Sample;

pub const MANIFEST_FILE: &str = "manifest.json";

/// File paths of one scene, relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneEntry {
    pub cloud: PathBuf,
    /// Point cloud file whose labels replace those of `cloud`; the labels are
    /// usually stored in `cloud` itself.
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default)]
    pub occupancy: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    /// Semantic classes, excluding empty.
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub partition: PartitionConfig,
    pub grid: GridSpec,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.num_classes {
            return Err(Error::Data(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        self.partition.validate()?;
        self.grid.validate()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads every scene; paths resolve against `root`.
    pub fn load(&self, root: &Path) -> Result<Vec<Sample>> {
        self.scenes
            .iter()
            .map(|s| {
                let mut cloud = read_point_cloud(&root.join(&s.cloud))?;
                if let Some(lp) = &s.labels {
                    let lab = read_point_cloud(&root.join(lp))?;
                    if lab.len() != cloud.len() || lab.labels.is_none() {
                        return Err(Error::Data(format!(
                            "{}: label file does not match {} points",
                            lp.display(),
                            cloud.len()
                        )));
                    }
                    cloud.labels = lab.labels;
                }
                if cloud.labels.is_some() {
                    cloud.validate_labels(self.num_classes)?;
                }
                let occupancy = match &s.occupancy {
                    Some(p) => {
                        let occ = read_occupancy(&root.join(p))?;
                        if occ.spec.dims != self.grid.dims {
                            return Err(Error::Data(format!(
                                "{}: dims {:?} differ from manifest grid {:?}",
                                p.display(),
                                occ.spec.dims,
                                self.grid.dims
                            )));
                        }
                        Some(occ)
                    }
                    None => None,
                };
                Ok(Sample { cloud, occupancy })
            })
            .collect()
    }
}

/// Settings of a generated dataset. Scene `i` uses `scene` with seed
/// `seed + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub scenes: usize,
    pub seed: u64,
    pub scene: SceneSpec,
    pub class_names: Vec<String>,
    pub partition: PartitionConfig,
}

impl GenConfig {
    /// Scene `i` of the dataset.
    pub fn scene_spec(&self, i: usize) -> SceneSpec {
        let mut spec = self.scene.clone();
        spec.seed = self.seed.wrapping_add(i as u64);
        spec
    }

    /// Generates every scene in memory.
    pub fn samples(&self) -> Result<Vec<Sample>> {
        (0..self.scenes)
            .map(|i| {
                let (cloud, occ) = gen_synthetic_scene(&self.scene_spec(i))?;
                Ok(Sample {
                    cloud,
                    occupancy: Some(occ),
                })
            })
            .collect()
    }
}

/// Writes `scene_XXX.ctpv`, `scene_XXX.cocc` and the manifest into `dir`.
pub fn generate_dataset(cfg: &GenConfig, dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut scenes = Vec::with_capacity(cfg.scenes);
    for i in 0..cfg.scenes {
        let (pc, occ) = gen_synthetic_scene(&cfg.scene_spec(i))?;
        let cloud = PathBuf::from(format!("scene_{i:03}.ctpv"));
        let occupancy = PathBuf::from(format!("scene_{i:03}.cocc"));
        write_point_cloud(&pc, &dir.join(&cloud))?;
        write_occupancy(&occ, &dir.join(&occupancy))?;
        scenes.push(SceneEntry {
            cloud,
            labels: None,
            occupancy: Some(occupancy),
        });
    }
    let manifest = DatasetManifest {
        num_classes: cfg.class_names.len(),
        class_names: cfg.class_names.clone(),
        partition: cfg.partition,
        grid: cfg.scene.grid,
        scenes,
    };
    manifest.validate()?;
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Class names of [`SceneSpec::urban`].
pub fn urban_class_names() -> Vec<String> {
    ["road", "sidewalk", "car", "pole", "building", "truck"]
        .map(String::from)
        .to_vec()
}
