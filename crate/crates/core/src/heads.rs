//! Segmentation heads and coarse-to-fine occupancy inference.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, PartitionConfig, TpvGridSpec};
use crate::io::OccupancyGrid;
use crate::projector::TpvTriple;
use crate::query::query_voxels;
use crate::tensor::{linear_taps, BoundParams, Graph, Mlp2, Taps, Tensor, Var};

/// Row-wise two-layer MLP producing class logits.
pub fn seg_head(g: &Graph, p: &BoundParams, head: &Mlp2, features: Var) -> Result<Var> {
    head.forward(g, p, features)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Grid with `factor` times as many voxels per axis over the same extent.
pub fn refine(spec: &GridSpec, factor: usize) -> Result<GridSpec> {
    if factor == 0 {
        return Err(Error::config("upsampling factor must be at least 1"));
    }
    Ok(GridSpec {
        dims: spec.dims.map(|d| d * factor),
        origin: spec.origin,
        voxel_size: spec.voxel_size / factor as f64,
    })
}

/// Trilinear upsampling of coarse logits `[X·Y·Z, classes]` (x slowest)
/// followed by per-voxel argmax, without materializing the fine logits.
///
/// Interpolation runs x, then y, then z, in the same order and with the same
/// stencils as [`Graph::resize_trilinear_3d`], so the fine logits it
/// implies are bit-identical to the dense path.
pub fn upsample_argmax(logits: &Tensor, coarse_dims: [usize; 3], factor: usize, memory_cap: usize) -> Result<Vec<u16>> {
    let [cx, cy, cz] = coarse_dims;
    let n = cx * cy * cz;
    if logits.rank() != 2 || logits.shape()[0] != n || n == 0 {
        return Err(Error::shape(format!(
            "upsample_argmax: logits {:?} for coarse dims {coarse_dims:?}",
            logits.shape()
        )));
    }
    if factor == 0 {
        return Err(Error::config("upsampling factor must be at least 1"));
    }
    let classes = logits.shape()[1];
    if classes > u16::MAX as usize + 1 {
        return Err(Error::config(format!("{classes} classes do not fit a u16 grid")));
    }
    let fine = coarse_dims.map(|d| d * factor);
    let nfine = fine.iter().product::<usize>();
    let bytes = nfine * std::mem::size_of::<u16>() + logits.len() * std::mem::size_of::<f64>();
    if bytes > memory_cap {
        return Err(Error::MemoryCap {
            dims: fine.to_vec(),
            bytes,
            cap: memory_cap,
        });
    }
    let tx = linear_taps(cx, factor, false);
    let ty = linear_taps(cy, factor, false);
    let tz = linear_taps(cz, factor, false);
    let l = logits.data();
    let at = |i: usize, j: usize, k: usize| &l[((i * cy + j) * cz + k) * classes..][..classes];
    let lerp = |t: &Taps, a: f64, b: f64| (1.0 - t.t) * a + t.t * b;
    let mut out = vec![0u16; nfine];
    out.par_chunks_mut(fine[1] * fine[2]).enumerate().for_each(|(x, slab)| {
        let px = &tx[x];
        let mut vx = vec![0.0; classes * 4];
        let mut vy = vec![0.0; classes * 2];
        let mut v = vec![0.0; classes];
        for (y, py) in ty.iter().enumerate() {
            for (z, pz) in tz.iter().enumerate() {
                for (slot, (j, k)) in [(py.i0, pz.i0), (py.i0, pz.i1), (py.i1, pz.i0), (py.i1, pz.i1)]
                    .into_iter()
                    .enumerate()
                {
                    let (a, b) = (at(px.i0, j, k), at(px.i1, j, k));
                    for c in 0..classes {
                        vx[slot * classes + c] = lerp(px, a[c], b[c]);
                    }
                }
                for c in 0..classes {
                    vy[c] = lerp(py, vx[c], vx[2 * classes + c]);
                    vy[classes + c] = lerp(py, vx[classes + c], vx[3 * classes + c]);
                    v[c] = lerp(pz, vy[c], vy[classes + c]);
                }
                slab[y * fine[2] + z] = argmax(&v) as u16;
            }
        }
    });
    Ok(out)
}

/// Settings of the coarse-to-fine occupancy path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OccupancyInference {
    pub coarse: GridSpec,
    pub factor: usize,
    pub memory_cap: usize,
}

/// Queries the planes at the coarse voxel centers, classifies them with the
/// occupancy head, and upsamples the logits to the final grid. Class 0 is
/// empty.
pub fn occupancy_inference(
    g: &Graph,
    p: &BoundParams,
    planes: &TpvTriple,
    cfg: &PartitionConfig,
    grid: &TpvGridSpec,
    head: &Mlp2,
    inf: &OccupancyInference,
) -> Result<OccupancyGrid> {
    let feats = query_voxels(g, &inf.coarse, planes, cfg, grid, inf.memory_cap)?;
    let logits = seg_head(g, p, head, feats)?;
    let values = upsample_argmax(&g.value(logits), inf.coarse.dims, inf.factor, inf.memory_cap)?;
    Ok(OccupancyGrid {
        spec: refine(&inf.coarse, inf.factor)?,
        values,
    })
}

/// Dense reference: `[X·Y·Z, classes]` logits upsampled with
/// [`Graph::resize_trilinear_3d`], returned as `[fine voxels, classes]`.
pub fn upsample_logits_dense(logits: &Tensor, coarse_dims: [usize; 3], factor: usize) -> Result<Tensor> {
    let classes = logits.shape()[1];
    let g = Graph::inference();
    let x = g.constant(logits.clone());
    let x = g.reshape(x, &[coarse_dims[0], coarse_dims[1], coarse_dims[2], classes])?;
    let x = g.permute(x, &[3, 0, 1, 2])?;
    let y = g.resize_trilinear_3d(x, factor)?;
    let y = g.permute(y, &[1, 2, 3, 0])?;
    let n: usize = coarse_dims.iter().map(|d| d * factor).product();
    let y = g.reshape(y, &[n, classes])?;
    Ok(g.value(y).as_ref().clone())
}
