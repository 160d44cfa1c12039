//! Point featurization, cylindrical scatter-max voxelization and spatial
//! group pooling onto the three TPV planes.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{cart_to_cyl, cyl_to_voxel_index, PartitionConfig};
use crate::io::PointCloud;
use crate::tensor::{BoundParams, Graph, Mlp2, ParamStore, Tensor, Var};

/// Width of the per-point input vector `(r, sin θ, cos θ, z, intensity)`.
pub const POINT_INPUT_DIM: usize = 5;

/// The three TPV planes. Feature maps are stored channel-first as
/// `[C, A, B]` with `(A, B)` = `(H, W)`, `(W, D)` and `(D, H)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plane {
    Hw,
    Wd,
    Dh,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Hw, Plane::Wd, Plane::Dh];

    pub fn name(self) -> &'static str {
        match self {
            Plane::Hw => "hw",
            Plane::Wd => "wd",
            Plane::Dh => "dh",
        }
    }

    /// Voxel axes (0 = radius, 1 = angle, 2 = height) spanning the plane, and
    /// the axis pooled away.
    pub fn axes(self) -> ([usize; 2], usize) {
        match self {
            Plane::Hw => ([0, 1], 2),
            Plane::Wd => ([1, 2], 0),
            Plane::Dh => ([2, 0], 1),
        }
    }

    /// Spatial axis (0 = A, 1 = B) holding the angle, if any.
    pub fn angle_axis(self) -> Option<usize> {
        match self {
            Plane::Hw => Some(1),
            Plane::Wd => Some(0),
            Plane::Dh => None,
        }
    }

    /// Plane extents `(A, B)` for voxel dims `[H, W, D]`.
    pub fn extents(self, dims: [usize; 3]) -> [usize; 2] {
        let ([a, b], _) = self.axes();
        [dims[a], dims[b]]
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One value per plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TpvTriple<T = Var> {
    pub hw: T,
    pub wd: T,
    pub dh: T,
}

impl<T> TpvTriple<T> {
    pub fn get(&self, p: Plane) -> &T {
        match p {
            Plane::Hw => &self.hw,
            Plane::Wd => &self.wd,
            Plane::Dh => &self.dh,
        }
    }

    pub fn from_fn(mut f: impl FnMut(Plane) -> T) -> Self {
        Self {
            hw: f(Plane::Hw),
            wd: f(Plane::Wd),
            dh: f(Plane::Dh),
        }
    }

    pub fn try_from_fn<E>(mut f: impl FnMut(Plane) -> std::result::Result<T, E>) -> std::result::Result<Self, E> {
        Ok(Self {
            hw: f(Plane::Hw)?,
            wd: f(Plane::Wd)?,
            dh: f(Plane::Dh)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(Plane, &T) -> U) -> TpvTriple<U> {
        TpvTriple {
            hw: f(Plane::Hw, &self.hw),
            wd: f(Plane::Wd, &self.wd),
            dh: f(Plane::Dh, &self.dh),
        }
    }
}

/// Per-point network inputs `[n, 5]`. Radius and height are rescaled to
/// `[0, 1]` over the partition range so all inputs share a scale.
pub fn point_inputs(pc: &PointCloud, cfg: &PartitionConfig) -> Tensor {
    let mut data = Vec::with_capacity(pc.len() * POINT_INPUT_DIM);
    for i in 0..pc.len() {
        let c = cart_to_cyl(pc.point(i));
        data.extend_from_slice(&[
            (c.r - cfg.r_min) / (cfg.r_max - cfg.r_min),
            c.theta.sin(),
            c.theta.cos(),
            (c.z - cfg.z_min) / (cfg.z_max - cfg.z_min),
            pc.intensity[i] as f64,
        ]);
    }
    Tensor::new(vec![pc.len(), POINT_INPUT_DIM], data).expect("row length")
}

/// Point-wise MLP `5 -> 4C -> C`.
#[derive(Debug, Clone, Copy)]
pub struct PointMlp {
    pub mlp: Mlp2,
    pub channels: usize,
}

impl PointMlp {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut impl Rng) -> Self {
        Self {
            mlp: Mlp2::new(store, name, POINT_INPUT_DIM, 4 * channels, channels, rng),
            channels,
        }
    }
}

/// Point features `[n, C]`.
pub fn point_mlp(g: &Graph, p: &BoundParams, m: &PointMlp, inputs: Var) -> Result<Var> {
    m.mlp.forward(g, p, inputs)
}

/// Dense cylindrical feature grid.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    /// `[H, W, D, C]`.
    pub features: Var,
    /// `H·W·D` flags, row-major; true where at least one point landed.
    pub mask: Vec<bool>,
    pub dims: [usize; 3],
    /// Point features the grid was reduced from, with the winning point of
    /// every `(voxel, channel)` entry (`usize::MAX` for empty voxels). Lets
    /// pooling send gradients straight to the points.
    pub source: Option<(Var, Rc<Vec<usize>>)>,
}

/// Voxel of each point, `None` for points outside the partition.
pub fn point_voxels(pc: &PointCloud, cfg: &PartitionConfig) -> Vec<Option<usize>> {
    (0..pc.len())
        .map(|i| {
            cyl_to_voxel_index(cart_to_cyl(pc.point(i)), cfg).map(|[a, b, c]| (a * cfg.w + b) * cfg.d + c)
        })
        .collect()
}

/// Channelwise max of point features per voxel. Empty voxels hold 0; the
/// gradient of each output goes to the lowest-index point attaining the max.
pub fn voxelize_max(g: &Graph, feat: Var, pc: &PointCloud, cfg: &PartitionConfig) -> Result<VoxelGrid> {
    let fv = g.value(feat);
    if fv.rank() != 2 || fv.shape()[0] != pc.len() {
        return Err(Error::shape(format!(
            "voxelize_max: features {:?} for {} points",
            fv.shape(),
            pc.len()
        )));
    }
    let c = fv.shape()[1];
    let nvox = cfg.num_voxels();
    let mut out = vec![0.0; nvox * c];
    let mut arg = vec![usize::MAX; nvox * c];
    let mut mask = vec![false; nvox];
    for (i, v) in point_voxels(pc, cfg).into_iter().enumerate() {
        let Some(v) = v else { continue };
        let row = &fv.data()[i * c..(i + 1) * c];
        let first = !mask[v];
        mask[v] = true;
        for (ch, &x) in row.iter().enumerate() {
            let o = v * c + ch;
            if first || x > out[o] {
                out[o] = x;
                arg[o] = i;
            }
        }
    }
    let dims = cfg.dims();
    let value = Tensor::new(vec![dims[0], dims[1], dims[2], c], out)?;
    let n = pc.len();
    let arg = Rc::new(arg);
    let source = Some((feat, Rc::clone(&arg)));
    let features = g.custom(
        value,
        &[feat],
        Some(Box::new(move |gr, _| {
            let mut gi = vec![0.0; n * c];
            for (o, (&a, &gv)) in arg.iter().zip(gr.data()).enumerate() {
                if a != usize::MAX {
                    gi[a * c + o % c] += gv;
                }
            }
            vec![Some(Tensor::new(vec![n, c], gi).unwrap())]
        })),
    );
    Ok(VoxelGrid {
        features,
        mask,
        dims,
        source,
    })
}

/// Index range `[floor(g·L/K), floor((g+1)·L/K))` of group `g`.
pub fn group_range(g: usize, len: usize, k: usize) -> std::ops::Range<usize> {
    g * len / k..(g + 1) * len / k
}

/// Grouped channelwise max of `x: [H, W, D, C]` onto a plane: values
/// `[A·B·K·C]` (group-major per cell) and the flat input index of each
/// winner. Ties go to the lowest index along the pooled axis.
fn group_max_raw(x: &[f64], dims: [usize; 3], c: usize, plane: Plane, k: usize) -> (Vec<f64>, Vec<usize>) {
    let ([ax_a, ax_b], ax_p) = plane.axes();
    let len = dims[ax_p];
    let [_, nb] = plane.extents(dims);
    let mut group_of = vec![0; len];
    for grp in 0..k {
        for l in group_range(grp, len, k) {
            group_of[l] = grp;
        }
    }
    let cells = plane.extents(dims).iter().product::<usize>();
    let mut out = vec![f64::NEG_INFINITY; cells * k * c];
    let mut arg = vec![0usize; cells * k * c];
    // memory order visits every pooled column with increasing index, so the
    // strict comparison keeps the lowest index among ties
    let mut v = 0;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for l3 in 0..dims[2] {
                let idx = [i, j, l3];
                let base = ((idx[ax_a] * nb + idx[ax_b]) * k + group_of[idx[ax_p]]) * c;
                let src = v * c;
                for ch in 0..c {
                    let val = x[src + ch];
                    if val > out[base + ch] {
                        out[base + ch] = val;
                        arg[base + ch] = src + ch;
                    }
                }
                v += 1;
            }
        }
    }
    (out, arg)
}

fn check_groups(plane: Plane, dims: [usize; 3], k: usize) -> Result<()> {
    let len = dims[plane.axes().1];
    if k == 0 || k > len {
        return Err(Error::config(format!(
            "group count {k} invalid for pooled axis of length {len} ({} plane)",
            plane.name()
        )));
    }
    Ok(())
}

/// Grouped max along the plane's pooled axis: `[H, W, D, C]` to
/// `[A, B, K·C]`, group-major on the last axis. Gradient ties go to the
/// lowest index along the pooled axis.
pub fn group_max(g: &Graph, v: &VoxelGrid, plane: Plane, k: usize) -> Result<Var> {
    check_groups(plane, v.dims, k)?;
    let xv = g.value(v.features);
    let c = xv.shape()[3];
    let [na, nb] = plane.extents(v.dims);
    let (out, arg) = group_max_raw(xv.data(), v.dims, c, plane, k);
    let in_shape = xv.shape().to_vec();
    let value = Tensor::new(vec![na, nb, k * c], out)?;
    Ok(g.custom(
        value,
        &[v.features],
        Some(Box::new(move |gr, _| {
            let mut gi = Tensor::zeros(&in_shape);
            let d = gi.data_mut();
            for (&a, &gv) in arg.iter().zip(gr.data()) {
                d[a] += gv;
            }
            vec![Some(gi)]
        })),
    ))
}

/// [`group_max`] composed with the voxel reduction: same values, but the
/// gradient flows directly to the point features.
fn group_max_from_points(g: &Graph, v: &VoxelGrid, plane: Plane, k: usize) -> Result<Var> {
    let Some((points, point_arg)) = v.source.clone() else {
        return group_max(g, v, plane, k);
    };
    check_groups(plane, v.dims, k)?;
    let xv = g.value(v.features);
    let c = xv.shape()[3];
    let [na, nb] = plane.extents(v.dims);
    let (out, arg) = group_max_raw(xv.data(), v.dims, c, plane, k);
    let pshape = g.shape(points);
    let value = Tensor::new(vec![na, nb, k * c], out)?;
    Ok(g.custom(
        value,
        &[points],
        Some(Box::new(move |gr, _| {
            let mut gi = Tensor::zeros(&pshape);
            let d = gi.data_mut();
            for (&a, &gv) in arg.iter().zip(gr.data()) {
                let pt = point_arg[a];
                if pt != usize::MAX {
                    d[pt * c + a % c] += gv;
                }
            }
            vec![Some(gi)]
        })),
    ))
}

/// Per-plane `K·C -> C` mixers applied after grouped max pooling.
#[derive(Debug, Clone, Copy)]
pub struct GroupPool {
    pub k: usize,
    pub channels: usize,
    pub mlps: TpvTriple<Mlp2>,
}

impl GroupPool {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, k: usize, rng: &mut impl Rng) -> Self {
        let mlps = TpvTriple::from_fn(|p| {
            Mlp2::new(
                store,
                &format!("{name}.{}", p.name()),
                k * channels,
                channels,
                channels,
                rng,
            )
        });
        Self { k, channels, mlps }
    }
}

/// Group-pools the voxel grid onto the three planes and mixes each to
/// `[C, A, B]`.
pub fn spatial_group_pool(g: &Graph, p: &BoundParams, pool: &GroupPool, v: &VoxelGrid) -> Result<TpvTriple> {
    TpvTriple::try_from_fn(|plane| {
        let [na, nb] = plane.extents(v.dims);
        let pooled = group_max_from_points(g, v, plane, pool.k)?;
        let rows = g.reshape(pooled, &[na * nb, pool.k * pool.channels])?;
        let mixed = pool.mlps.get(plane).forward(g, p, rows)?;
        let hwc = g.reshape(mixed, &[na, nb, pool.channels])?;
        g.permute(hwc, &[2, 0, 1])
    })
}
