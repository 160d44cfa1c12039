//! Per-stage timing and memory accounting of one forward pass.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::io::PointCloud;
use crate::metrics::{cell_count, CellCount};
use crate::model::Model;
use crate::projector::{point_inputs, point_mlp, spatial_group_pool, voxelize_max, Plane, TpvTriple};
use crate::tensor::{Dtype, Graph, Var};

pub const BENCH_SCHEMA: &str = "cyltpv.bench/1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTimes {
    pub point_mlp: f64,
    pub voxelize: f64,
    pub group_pool: f64,
    pub encoder: f64,
    pub query: f64,
    pub head: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchReport {
    pub schema: String,
    pub partition: [usize; 3],
    pub channels: usize,
    pub precision: Dtype,
    pub points: usize,
    pub repeats: usize,
    /// Median wall time per stage over the repeats, milliseconds.
    pub stage_ms: StageTimes,
    pub points_per_second: f64,
    /// Largest total size of the three planes at any point of the pass.
    pub peak_plane_feature_bytes: usize,
    /// Size of a materialized `H×W×D×C` feature grid at the same precision.
    pub dense_voxel_feature_bytes: usize,
    pub plane_to_voxel_bytes: f64,
    pub cell_count: CellCount,
}

fn plane_bytes(g: &Graph, t: &TpvTriple<Var>, elem: usize) -> usize {
    Plane::ALL
        .iter()
        .map(|&p| g.shape(*t.get(p)).iter().product::<usize>() * elem)
        .sum()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Runs the lidar-segmentation forward pass `repeats` times.
pub fn run_bench(model: &Model, pc: &PointCloud, repeats: usize, precision: Dtype) -> Result<BenchReport> {
    let repeats = repeats.max(1);
    let cfg = &model.config.partition;
    let elem = precision.size();
    let mut times: Vec<[f64; 6]> = Vec::with_capacity(repeats);
    let mut peak = 0;
    for _ in 0..repeats {
        let g = Graph::inference();
        let p = model.store.bind(&g);
        let mut t = [0.0; 6];
        let mut clock = Instant::now();
        let mut lap = |slot: &mut f64| {
            *slot = clock.elapsed().as_secs_f64() * 1e3;
            clock = Instant::now();
        };
        let inputs = g.constant(point_inputs(pc, cfg));
        let feats = point_mlp(&g, &p, &model.point_mlp, inputs)?;
        lap(&mut t[0]);
        let vox = voxelize_max(&g, feats, pc, cfg)?;
        lap(&mut t[1]);
        let raw = spatial_group_pool(&g, &p, &model.pool, &vox)?;
        lap(&mut t[2]);
        let planes = crate::encoder::encode_tpv(&g, &p, &model.encoder, &raw, model.config.planes, model.config.upsample)?;
        lap(&mut t[3]);
        let pts: Vec<_> = (0..pc.len()).map(|i| pc.point(i)).collect();
        let q = crate::query::query_points(&g, &pts, &planes, cfg, &model.grid)?;
        lap(&mut t[4]);
        let _ = crate::heads::seg_head(&g, &p, &model.head_lidar, q)?;
        lap(&mut t[5]);
        peak = peak.max(plane_bytes(&g, &raw, elem)).max(plane_bytes(&g, &planes, elem));
        times.push(t);
    }
    let stage = |i: usize| median(times.iter().map(|t| t[i]).collect());
    let totals = median(times.iter().map(|t| t.iter().sum()).collect());
    let dense = cfg.num_voxels() * model.config.channels * elem;
    Ok(BenchReport {
        schema: BENCH_SCHEMA.into(),
        partition: cfg.dims(),
        channels: model.config.channels,
        precision,
        points: pc.len(),
        repeats,
        stage_ms: StageTimes {
            point_mlp: stage(0),
            voxelize: stage(1),
            group_pool: stage(2),
            encoder: stage(3),
            query: stage(4),
            head: stage(5),
            total: totals,
        },
        points_per_second: if totals > 0.0 { pc.len() as f64 / (totals / 1e3) } else { 0.0 },
        peak_plane_feature_bytes: peak,
        dense_voxel_feature_bytes: dense,
        plane_to_voxel_bytes: peak as f64 / dense as f64,
        cell_count: cell_count(cfg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn toy_bench_accounting() {
        let m = Model::new(&ModelConfig::toy(3), 0).unwrap();
        let pc = PointCloud::new(vec![[1.0, 2.0, 0.0], [-4.0, 1.0, 1.0]], vec![0.1, 0.9], None).unwrap();
        let r = run_bench(&m, &pc, 2, Dtype::F32).unwrap();
        // 8 channels over 48×36 + 36×8 + 8×48 cells, 4 bytes each
        assert_eq!(r.peak_plane_feature_bytes, 8 * (48 * 36 + 36 * 8 + 8 * 48) * 4);
        assert_eq!(r.dense_voxel_feature_bytes, 8 * 48 * 36 * 8 * 4);
        assert_eq!(r.cell_count.tpv_cells, 2400);
    }
}
