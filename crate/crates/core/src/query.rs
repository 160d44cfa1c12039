//! Recovering 3D features from the TPV planes by bilinear sampling and
//! summation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{world_to_tpv, CartPoint, GridSpec, PartitionConfig, TpvGridSpec};
use crate::projector::{Plane, TpvTriple};
use crate::tensor::{Graph, Tensor, Var};

/// Default bound on a dense query result, in bytes.
pub const DEFAULT_MEMORY_CAP: usize = 1 << 30;

/// Linear stencil along one axis of length `n` at continuous coordinate `u`
/// (cell centers at integers).
pub fn axis_stencil(u: f64, n: usize, circular: bool) -> (usize, usize, f64) {
    if circular {
        let fl = u.floor();
        let i0 = (fl as i64).rem_euclid(n as i64) as usize;
        (i0, (i0 + 1) % n, u - fl)
    } else {
        let s = u.clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    }
}

type Stencil = [(usize, f64); 4];

fn stencil(u: [f64; 2], [na, nb]: [usize; 2], circular: Option<usize>) -> Stencil {
    let (a0, a1, ta) = axis_stencil(u[0], na, circular == Some(0));
    let (b0, b1, tb) = axis_stencil(u[1], nb, circular == Some(1));
    [
        (a0 * nb + b0, (1.0 - ta) * (1.0 - tb)),
        (a0 * nb + b1, (1.0 - ta) * tb),
        (a1 * nb + b0, ta * (1.0 - tb)),
        (a1 * nb + b1, ta * tb),
    ]
}

/// Bilinear samples of `plane: [C, A, B]` at continuous `(a, b)` coordinates,
/// giving `[m, C]`. `circular` marks the periodic spatial axis; the others
/// clamp to the border.
pub fn sample_plane(g: &Graph, plane: Var, coords: &[[f64; 2]], circular: Option<usize>) -> Result<Var> {
    let pv = g.value(plane);
    if pv.rank() != 3 || pv.shape()[1] == 0 || pv.shape()[2] == 0 {
        return Err(Error::shape(format!("sample_plane: plane {:?}", pv.shape())));
    }
    if let Some(i) = coords.iter().position(|c| !(c[0].is_finite() && c[1].is_finite())) {
        return Err(Error::NonFinite(format!("query coordinate {i}")));
    }
    let (c, na, nb) = (pv.shape()[0], pv.shape()[1], pv.shape()[2]);
    let area = na * nb;
    let stencils: Vec<Stencil> = coords.iter().map(|&u| stencil(u, [na, nb], circular)).collect();
    let mut out = vec![0.0; coords.len() * c];
    let data = pv.data();
    out.par_chunks_mut(c.max(1)).zip(&stencils).for_each(|(row, st)| {
        for (ch, o) in row.iter_mut().enumerate() {
            let base = &data[ch * area..(ch + 1) * area];
            *o = st.iter().map(|&(i, w)| w * base[i]).sum();
        }
    });
    let value = Tensor::new(vec![coords.len(), c], out)?;
    let shape = pv.shape().to_vec();
    Ok(g.custom(
        value,
        &[plane],
        Some(Box::new(move |gr, _| {
            let mut gp = Tensor::zeros(&shape);
            let d = gp.data_mut();
            for (row, st) in gr.data().chunks_exact(c.max(1)).zip(&stencils) {
                for (ch, &gv) in row.iter().enumerate() {
                    for &(i, w) in st {
                        d[ch * area + i] += w * gv;
                    }
                }
            }
            vec![Some(gp)]
        })),
    ))
}

/// Plane coordinates `(a, b)` of TPV position `[h, w, d]`.
pub fn plane_coords(plane: Plane, [h, w, d]: [f64; 3]) -> [f64; 2] {
    match plane {
        Plane::Hw => [h, w],
        Plane::Wd => [w, d],
        Plane::Dh => [d, h],
    }
}

fn check_planes(g: &Graph, planes: &TpvTriple, grid: &TpvGridSpec) -> Result<usize> {
    let dims = grid.final_dims();
    let mut channels = None;
    for p in Plane::ALL {
        let s = g.shape(*planes.get(p));
        let [a, b] = p.extents(dims);
        if s.len() != 3 || s[1] != a || s[2] != b || channels.is_some_and(|c| c != s[0]) {
            return Err(Error::shape(format!(
                "{} plane {s:?} does not match final TPV dims {dims:?}",
                p.name()
            )));
        }
        channels = Some(s[0]);
    }
    Ok(channels.unwrap())
}

/// Summed TPV features `[m, C]` of world points. The angle wraps; radius and
/// height clamp to the partition.
pub fn query_points(
    g: &Graph,
    points: &[CartPoint],
    planes: &TpvTriple,
    cfg: &PartitionConfig,
    grid: &TpvGridSpec,
) -> Result<Var> {
    check_planes(g, planes, grid)?;
    if let Some(i) = points.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("query point {i}")));
    }
    let tpv: Vec<[f64; 3]> = points.iter().map(|&p| world_to_tpv(p, cfg, grid)).collect();
    let mut acc: Option<Var> = None;
    for p in Plane::ALL {
        let coords: Vec<[f64; 2]> = tpv.iter().map(|&t| plane_coords(p, t)).collect();
        let s = sample_plane(g, *planes.get(p), &coords, p.angle_axis())?;
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    Ok(acc.unwrap())
}

/// Features `[X·Y·Z, C]` at every voxel center of `spec`, x slowest.
pub fn query_voxels(
    g: &Graph,
    spec: &GridSpec,
    planes: &TpvTriple,
    cfg: &PartitionConfig,
    grid: &TpvGridSpec,
    memory_cap: usize,
) -> Result<Var> {
    spec.validate()?;
    let c = check_planes(g, planes, grid)?;
    let n = spec.num_voxels();
    let bytes = n.saturating_mul(c).saturating_mul(std::mem::size_of::<f64>());
    if bytes > memory_cap {
        return Err(Error::MemoryCap {
            dims: spec.dims.to_vec(),
            bytes,
            cap: memory_cap,
        });
    }
    let [nx, ny, nz] = spec.dims;
    let mut centers = Vec::with_capacity(n);
    for i in 0..nx {
        for j in 0..ny {
            for k in 0..nz {
                centers.push(spec.center_unchecked([i, j, k]));
            }
        }
    }
    query_points(g, &centers, planes, cfg, grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{cyl_to_cart, CylPoint};
    use crate::tensor::{finite_diff_check, GradCheckOptions};

    #[test]
    fn centers_and_midpoints() {
        let g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 2, 2], vec![0.0, 2.0, 4.0, 6.0]).unwrap());
        let s = sample_plane(&g, p, &[[0.0, 0.0], [1.0, 1.0], [0.0, 0.5], [0.5, 0.5]], None).unwrap();
        assert_eq!(g.value(s).data(), &[0.0, 6.0, 1.0, 3.0]);
    }

    #[test]
    fn seam_interpolation() {
        let g = Graph::new();
        let (a, b) = (3.0, -1.0);
        // 4 cells on the periodic axis: last = a, first = b
        let p = g.constant(Tensor::new(vec![1, 1, 4], vec![b, 0.0, 0.0, a]).unwrap());
        let t = 0.3;
        let s = sample_plane(&g, p, &[[0.0, 3.0 + t], [0.0, -1.0 + t]], Some(1)).unwrap();
        let want = (1.0 - t) * a + t * b;
        for v in g.value(s).data() {
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn clamps_non_periodic_axes() {
        let g = Graph::new();
        let p = g.constant(Tensor::new(vec![1, 2, 1], vec![1.0, 5.0]).unwrap());
        let s = sample_plane(&g, p, &[[-3.0, 0.0], [9.0, 0.0]], None).unwrap();
        assert_eq!(g.value(s).data(), &[1.0, 5.0]);
    }

    fn setup() -> (PartitionConfig, TpvGridSpec) {
        let cfg = PartitionConfig::new((0.0, 8.0), (-2.0, 2.0), [8, 12, 4]).unwrap();
        let grid = TpvGridSpec::for_partition(&cfg, 2, 2).unwrap();
        (cfg, grid)
    }

    #[test]
    fn constant_planes_sum() {
        let (cfg, grid) = setup();
        let g = Graph::new();
        let planes = TpvTriple::from_fn(|p| {
            let [a, b] = p.extents(grid.final_dims());
            g.constant(Tensor::full(&[2, a, b], [1.0, 10.0, 100.0][p.index()]))
        });
        let pts = [CartPoint::new(1.0, 2.0, 0.3), CartPoint::new(-50.0, 3.0, 9.0)];
        let q = query_points(&g, &pts, &planes, &cfg, &grid).unwrap();
        assert!(g.value(q).data().iter().all(|&v| v == 111.0));
        let spec = GridSpec {
            dims: [1, 1, 1],
            origin: [0.5, 0.5, 0.0],
            voxel_size: 1.0,
        };
        let v = query_voxels(&g, &spec, &planes, &cfg, &grid, DEFAULT_MEMORY_CAP).unwrap();
        assert_eq!(g.value(v).data(), &[111.0, 111.0]);
        let err = query_voxels(&g, &spec, &planes, &cfg, &grid, 8).unwrap_err();
        assert!(matches!(err, Error::MemoryCap { ref dims, .. } if dims == &[1, 1, 1]));
    }

    #[test]
    fn angle_is_periodic() {
        let (cfg, grid) = setup();
        let g = Graph::new();
        let planes = TpvTriple::from_fn(|p| {
            let [a, b] = p.extents(grid.final_dims());
            g.constant(Tensor::from_fn(&[1, a, b], |i| (i as f64 * 0.77).sin()))
        });
        let p0 = cyl_to_cart(CylPoint { r: 3.3, theta: 3.0, z: 0.4 });
        let p1 = cyl_to_cart(CylPoint {
            r: 3.3,
            theta: 3.0 - std::f64::consts::TAU,
            z: 0.4,
        });
        let q = query_points(&g, &[p0, p1], &planes, &cfg, &grid).unwrap();
        let v = g.value(q);
        assert!((v.data()[0] - v.data()[1]).abs() < 1e-12);
    }

    #[test]
    fn plane_gradients() {
        let (cfg, grid) = setup();
        let dims = grid.final_dims();
        let inputs: Vec<Tensor> = Plane::ALL
            .iter()
            .map(|p| {
                let [a, b] = p.extents(dims);
                Tensor::from_fn(&[2, a, b], |i| (i as f64 * 0.31).cos())
            })
            .collect();
        let pts: Vec<CartPoint> = (0..10)
            .map(|i| cyl_to_cart(CylPoint { r: 0.7 * i as f64, theta: 0.6 * i as f64 - 3.0, z: 0.35 * i as f64 - 1.9 }))
            .collect();
        let f = |g: &Graph, v: &[Var]| -> Result<Var> {
            let planes = TpvTriple { hw: v[0], wd: v[1], dh: v[2] };
            let q = query_points(g, &pts, &planes, &cfg, &grid)?;
            let sq = g.mul(q, q)?;
            Ok(g.sum(sq))
        };
        let r = finite_diff_check(f, &inputs, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
