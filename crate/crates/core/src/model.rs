//! The full network: projector, shared plane encoder, TPV query and the two
//! task heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_tpv, BackboneConfig, Encoder, PlaneMask};
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, PartitionConfig, TpvGridSpec};
use crate::heads::{occupancy_inference, seg_head, OccupancyInference};
use crate::io::{OccupancyGrid, PointCloud};
use crate::projector::{point_inputs, point_mlp, spatial_group_pool, voxelize_max, GroupPool, PointMlp, TpvTriple};
use crate::query::{query_points, query_voxels};
use crate::tensor::{encode_checkpoint, load_checkpoint, BoundParams, Dtype, Graph, Mlp2, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub partition: PartitionConfig,
    /// Feature width `C` of points, voxels and planes.
    pub channels: usize,
    /// Spatial group pooling group count `K`.
    pub groups: usize,
    #[serde(default)]
    pub backbone: BackboneConfig,
    /// Upsampling ratio `s` after the encoder.
    pub upsample: usize,
    #[serde(default = "all_planes")]
    pub planes: PlaneMask,
    /// Semantic classes, excluding the empty class.
    pub num_classes: usize,
    pub head_hidden: usize,
}

fn all_planes() -> PlaneMask {
    PlaneMask::ALL
}

impl ModelConfig {
    /// Small configuration used by tests and examples: partition 48×36×8,
    /// `C = 8`, `K = 4`, `s = 2`.
    pub fn toy(num_classes: usize) -> Self {
        Self {
            partition: PartitionConfig::new((0.0, 24.0), (-3.0, 3.0), [48, 36, 8]).expect("valid"),
            channels: 8,
            groups: 4,
            backbone: BackboneConfig {
                widths: vec![8, 16, 16],
                strides: vec![1, 2, 2],
                fpn_width: 8,
                output_stride: 2,
                norm_groups: 2,
                ..Default::default()
            },
            upsample: 2,
            planes: PlaneMask::ALL,
            num_classes,
            head_hidden: 16,
        }
    }

    pub fn tpv_grid(&self) -> Result<TpvGridSpec> {
        TpvGridSpec::for_partition(&self.partition, self.backbone.output_stride, self.upsample)
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        self.backbone.validate()?;
        if self.channels == 0 || self.head_hidden == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be at least 1"));
        }
        if !self.planes.any() {
            return Err(Error::config("plane mask disables every plane"));
        }
        let dims = self.partition.dims();
        if self.groups == 0 || dims.iter().any(|&l| self.groups > l) {
            return Err(Error::config(format!(
                "group count {} must lie in 1..={} (shortest partition axis)",
                self.groups,
                dims.iter().min().unwrap()
            )));
        }
        for p in crate::projector::Plane::ALL {
            self.backbone.check_extents(p, p.extents(dims))?;
        }
        self.tpv_grid()?;
        Ok(())
    }
}

/// Parameters and module handles. Parameter names are stable and used in
/// checkpoints and freeze patterns: `projector.point_mlp.*`,
/// `projector.pool.{hw,wd,dh}.*`, `backbone.*`, `fpn.*`, `head.lidar.*`,
/// `head.occ.*`.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub grid: TpvGridSpec,
    pub store: ParamStore,
    pub point_mlp: PointMlp,
    pub pool: GroupPool,
    pub encoder: Encoder,
    /// Logits over the semantic classes; index `i` is label `i + 1`.
    pub head_lidar: Mlp2,
    /// Logits over empty plus the semantic classes.
    pub head_occ: Mlp2,
}

impl Model {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = config.channels;
        let point_mlp = PointMlp::new(&mut store, "projector.point_mlp", c, &mut rng);
        let pool = GroupPool::new(&mut store, "projector.pool", c, config.groups, &mut rng);
        let encoder = Encoder::new(&mut store, &config.backbone, c, c, &mut rng)?;
        let head_lidar = Mlp2::new(&mut store, "head.lidar", c, config.head_hidden, config.num_classes, &mut rng);
        let head_occ = Mlp2::new(&mut store, "head.occ", c, config.head_hidden, config.num_classes + 1, &mut rng);
        Ok(Self {
            config: config.clone(),
            grid: config.tpv_grid()?,
            store,
            point_mlp,
            pool,
            encoder,
            head_lidar,
            head_occ,
        })
    }

    /// Checkpoint bytes of every parameter in store order.
    pub fn checkpoint_bytes(&self, dtype: Dtype) -> Vec<u8> {
        encode_checkpoint(self.store.iter().map(|p| (p.name.as_str(), &p.value)), dtype)
    }

    pub fn save(&self, path: &std::path::Path, dtype: Dtype) -> Result<()> {
        std::fs::write(path, self.checkpoint_bytes(dtype)).map_err(|e| Error::io(path, e))
    }

    /// Builds the model for `config` and replaces its parameters with the
    /// checkpoint's; names and shapes must match.
    pub fn load(config: &ModelConfig, path: &std::path::Path) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        let entries = load_checkpoint(path)?;
        m.store.load_values(entries.into_iter().map(|e| (e.name, e.tensor)).collect())?;
        Ok(m)
    }

    /// Encoded, upsampled planes `[C, A, B]` of a cloud.
    pub fn planes(&self, g: &Graph, p: &BoundParams, pc: &PointCloud) -> Result<TpvTriple> {
        let cfg = &self.config.partition;
        let inputs = g.constant(point_inputs(pc, cfg));
        let feats = point_mlp(g, p, &self.point_mlp, inputs)?;
        let vox = voxelize_max(g, feats, pc, cfg)?;
        let raw = spatial_group_pool(g, p, &self.pool, &vox)?;
        encode_tpv(g, p, &self.encoder, &raw, self.config.planes, self.config.upsample)
    }

    /// Per-point semantic logits `[n, num_classes]`.
    pub fn point_logits(&self, g: &Graph, p: &BoundParams, pc: &PointCloud, planes: &TpvTriple) -> Result<Var> {
        let pts: Vec<_> = (0..pc.len()).map(|i| pc.point(i)).collect();
        let feats = query_points(g, &pts, planes, &self.config.partition, &self.grid)?;
        seg_head(g, p, &self.head_lidar, feats)
    }

    /// Occupancy logits `[X·Y·Z, num_classes + 1]` at the centers of `grid`.
    pub fn voxel_logits(
        &self,
        g: &Graph,
        p: &BoundParams,
        planes: &TpvTriple,
        grid: &GridSpec,
        memory_cap: usize,
    ) -> Result<Var> {
        let feats = query_voxels(g, grid, planes, &self.config.partition, &self.grid, memory_cap)?;
        seg_head(g, p, &self.head_occ, feats)
    }

    /// Predicted point labels (1-based).
    pub fn predict_points(&self, pc: &PointCloud) -> Result<Vec<u16>> {
        let g = Graph::inference();
        let p = self.store.bind(&g);
        let planes = self.planes(&g, &p, pc)?;
        let logits = g.value(self.point_logits(&g, &p, pc, &planes)?);
        let c = self.config.num_classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| crate::heads::argmax(row) as u16 + 1)
            .collect())
    }

    /// Coarse-to-fine occupancy prediction.
    pub fn predict_occupancy(&self, pc: &PointCloud, inf: &OccupancyInference) -> Result<OccupancyGrid> {
        let g = Graph::inference();
        let p = self.store.bind(&g);
        let planes = self.planes(&g, &p, pc)?;
        occupancy_inference(
            &g,
            &p,
            &planes,
            &self.config.partition,
            &self.grid,
            &self.head_occ,
            inf,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{gen_synthetic_scene, SceneSpec};

    #[test]
    fn shapes_and_names() {
        let cfg = ModelConfig::toy(6);
        let m = Model::new(&cfg, 3).unwrap();
        for prefix in ["projector.point_mlp", "projector.pool.hw", "backbone.stage0", "fpn.output", "head.lidar", "head.occ"] {
            assert!(m.store.iter().any(|p| p.name.starts_with(prefix)), "{prefix}");
        }
        let grid = GridSpec {
            dims: [32, 32, 6],
            origin: [-12.8, -12.8, -2.4],
            voxel_size: 0.8,
        };
        let (pc, _) = gen_synthetic_scene(&SceneSpec::urban(1, grid)).unwrap();
        let labels = m.predict_points(&pc).unwrap();
        assert_eq!(labels.len(), pc.len());
        assert!(labels.iter().all(|&l| (1..=6).contains(&l)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join("m.tpvw");
        let m = Model::new(&ModelConfig::toy(4), 9).unwrap();
        m.save(&path, Dtype::F64).unwrap();
        let back = Model::load(&ModelConfig::toy(4), &path).unwrap();
        assert_eq!(back.store, m.store);
        // wrong class count changes head shapes
        assert!(matches!(Model::load(&ModelConfig::toy(5), &path), Err(Error::Data(_))));
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = ModelConfig::toy(6);
        cfg.groups = 9;
        assert!(Model::new(&cfg, 0).is_err());
        let mut cfg = ModelConfig::toy(6);
        cfg.planes = PlaneMask {
            hw: false,
            wd: false,
            dh: false,
        };
        assert!(Model::new(&cfg, 0).is_err());
    }
}
