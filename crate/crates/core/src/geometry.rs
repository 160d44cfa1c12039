//! Coordinate systems and partition arithmetic.
//!
//! The cylindrical partition bins space by radius (`h` axis), azimuth
//! (`w` axis, always spanning `[-π, π)`) and height (`d` axis). Continuous
//! plane coordinates put the center of cell `i` at the integer `i`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const TAU: f64 = 2.0 * PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CartPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

/// Cylindrical coordinates with `theta` in `[-π, π)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CylPoint {
    pub r: f64,
    pub theta: f64,
    pub z: f64,
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(theta: f64) -> f64 {
    if (-PI..PI).contains(&theta) {
        return theta;
    }
    let t = (theta + PI).rem_euclid(TAU) - PI;
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if t >= PI {
        t - TAU
    } else {
        t
    }
}

pub fn cart_to_cyl(p: CartPoint) -> CylPoint {
    let r = p.x.hypot(p.y);
    let theta = if r == 0.0 {
        0.0
    } else {
        let t = p.y.atan2(p.x);
        if t >= PI {
            -PI
        } else {
            t
        }
    };
    CylPoint { r, theta, z: p.z }
}

pub fn cyl_to_cart(p: CylPoint) -> CartPoint {
    let (s, c) = p.theta.sin_cos();
    CartPoint {
        x: p.r * c,
        y: p.r * s,
        z: p.z,
    }
}

/// Cylindrical partition of the perceptive range into `h × w × d` bins
/// (radius × angle × height).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub r_min: f64,
    pub r_max: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl PartitionConfig {
    pub fn new(r: (f64, f64), z: (f64, f64), dims: [usize; 3]) -> Result<Self> {
        let cfg = Self {
            r_min: r.0,
            r_max: r.1,
            z_min: z.0,
            z_max: z.1,
            h: dims[0],
            w: dims[1],
            d: dims[2],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.r_min, self.r_max, self.z_min, self.z_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::config("partition bounds must be finite"));
        }
        if self.r_min < 0.0 || self.r_min >= self.r_max {
            return Err(Error::config(format!(
                "partition radius range [{}, {}) is empty or negative",
                self.r_min, self.r_max
            )));
        }
        if self.z_min >= self.z_max {
            return Err(Error::config(format!(
                "partition height range [{}, {}) is empty",
                self.z_min, self.z_max
            )));
        }
        if self.h == 0 || self.w == 0 || self.d == 0 {
            return Err(Error::config("partition bin counts must be positive"));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.h, self.w, self.d]
    }

    pub fn dr(&self) -> f64 {
        (self.r_max - self.r_min) / self.h as f64
    }

    pub fn dtheta(&self) -> f64 {
        TAU / self.w as f64
    }

    pub fn dz(&self) -> f64 {
        (self.z_max - self.z_min) / self.d as f64
    }

    pub fn num_voxels(&self) -> usize {
        self.h * self.w * self.d
    }
}

fn bin(value: f64, lo: f64, hi: f64, n: usize) -> Option<usize> {
    if !(value >= lo && value < hi) {
        return None;
    }
    let i = ((value - lo) * n as f64 / (hi - lo)).floor() as usize;
    // value < hi, so an index of n can only come from rounding
    Some(i.min(n - 1))
}

/// Half-open binning of a cylindrical point; `None` when `r` or `z` is
/// outside the partition range.
pub fn cyl_to_voxel_index(p: CylPoint, cfg: &PartitionConfig) -> Option<[usize; 3]> {
    let i = bin(p.r, cfg.r_min, cfg.r_max, cfg.h)?;
    let j = bin(wrap_angle(p.theta), -PI, PI, cfg.w)?;
    let k = bin(p.z, cfg.z_min, cfg.z_max, cfg.d)?;
    Some([i, j, k])
}

/// Resolution of the encoded planes (`cal_*`) and the upsampling ratio that
/// brings them to the final TPV resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TpvGridSpec {
    pub cal_h: usize,
    pub cal_w: usize,
    pub cal_d: usize,
    pub upsample: usize,
}

impl TpvGridSpec {
    /// Grid produced by an encoder with `output_stride` followed by `upsample`.
    pub fn for_partition(cfg: &PartitionConfig, output_stride: usize, upsample: usize) -> Result<Self> {
        if output_stride == 0 || upsample == 0 {
            return Err(Error::config("output stride and upsample ratio must be positive"));
        }
        for (name, n) in [("h", cfg.h), ("w", cfg.w), ("d", cfg.d)] {
            if n % output_stride != 0 {
                return Err(Error::config(format!(
                    "partition extent {name}={n} is not divisible by output stride {output_stride}"
                )));
            }
        }
        Ok(Self {
            cal_h: cfg.h / output_stride,
            cal_w: cfg.w / output_stride,
            cal_d: cfg.d / output_stride,
            upsample,
        })
    }

    /// Final plane resolution after upsampling.
    pub fn final_dims(&self) -> [usize; 3] {
        [
            self.cal_h * self.upsample,
            self.cal_w * self.upsample,
            self.cal_d * self.upsample,
        ]
    }
}

/// Continuous TPV coordinates `(h, w, d)` of a world point at the final plane
/// resolution. Radius and height are clamped to the partition range; the
/// angle is periodic.
pub fn world_to_tpv(p: CartPoint, cfg: &PartitionConfig, grid: &TpvGridSpec) -> [f64; 3] {
    let c = cart_to_cyl(p);
    let [nh, nw, nd] = grid.final_dims();
    let r = c.r.clamp(cfg.r_min, cfg.r_max);
    let z = c.z.clamp(cfg.z_min, cfg.z_max);
    let h = (r - cfg.r_min) * nh as f64 / (cfg.r_max - cfg.r_min) - 0.5;
    let w = (c.theta + PI) * nw as f64 / TAU - 0.5;
    let d = (z - cfg.z_min) * nd as f64 / (cfg.z_max - cfg.z_min) - 0.5;
    [h, w, d]
}

/// Dense Cartesian voxel grid: `dims` voxels of edge `voxel_size` starting at
/// `origin` (the minimum corner).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub voxel_size: f64,
}

impl GridSpec {
    /// The 512×512×40 grid at 0.2 m over [-51.2, 51.2]² × [-5, 3].
    pub fn occupancy_benchmark() -> Self {
        Self {
            dims: [512, 512, 40],
            origin: [-51.2, -51.2, -5.0],
            voxel_size: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::config("grid dims must be positive"));
        }
        if !(self.voxel_size.is_finite() && self.voxel_size > 0.0) {
            return Err(Error::config("voxel size must be positive and finite"));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("grid origin must be finite"));
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Linear index, x slowest and z fastest.
    pub fn linear_index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn max_corner(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.origin[a] + self.dims[a] as f64 * self.voxel_size)
    }

    pub fn voxel_center(&self, idx: [usize; 3]) -> Result<CartPoint> {
        if (0..3).any(|a| idx[a] >= self.dims[a]) {
            return Err(Error::Data(format!(
                "voxel index {idx:?} outside grid dims {:?}",
                self.dims
            )));
        }
        Ok(self.center_unchecked(idx))
    }

    pub(crate) fn center_unchecked(&self, idx: [usize; 3]) -> CartPoint {
        let c = |a: usize| self.origin[a] + (idx[a] as f64 + 0.5) * self.voxel_size;
        CartPoint::new(c(0), c(1), c(2))
    }

    /// Voxel containing `p` under half-open binning.
    pub fn voxel_of(&self, p: CartPoint) -> Option<[usize; 3]> {
        let v = [p.x, p.y, p.z];
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((v[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    /// Same extent, `factor` times larger voxels.
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.dims.iter().any(|d| d % factor != 0) {
            return Err(Error::config(format!(
                "grid dims {:?} are not divisible by factor {factor}",
                self.dims
            )));
        }
        Ok(Self {
            dims: self.dims.map(|d| d / factor),
            origin: self.origin,
            voxel_size: self.voxel_size * factor as f64,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cart_to_cyl_axis_points() {
        let c = cart_to_cyl(CartPoint::new(1.0, 0.0, 0.0));
        assert_eq!((c.r, c.theta, c.z), (1.0, 0.0, 0.0));
        let c = cart_to_cyl(CartPoint::new(0.0, 2.0, 5.0));
        assert_eq!((c.r, c.theta, c.z), (2.0, PI / 2.0, 5.0));
        let c = cart_to_cyl(CartPoint::new(-3.0, -4.0, 1.0));
        assert_eq!(c.r, 5.0);
        assert!(close(c.theta, (-4.0f64).atan2(-3.0), 1e-15));
        assert_eq!(c.z, 1.0);
    }

    #[test]
    fn origin_and_negative_x_axis() {
        let c = cart_to_cyl(CartPoint::new(0.0, 0.0, 3.0));
        assert_eq!((c.r, c.theta), (0.0, 0.0));
        // atan2 gives +π here, which is outside the half-open range
        let c = cart_to_cyl(CartPoint::new(-2.0, 0.0, 0.0));
        assert_eq!(c.theta, -PI);
    }

    #[test]
    fn cyl_to_cart_axis_points() {
        let p = cyl_to_cart(CylPoint { r: 1.0, theta: 0.0, z: 0.0 });
        assert_eq!((p.x, p.y, p.z), (1.0, 0.0, 0.0));
        let p = cyl_to_cart(CylPoint { r: 2.0, theta: PI / 2.0, z: 5.0 });
        assert!(close(p.x, 0.0, 1e-15) && close(p.y, 2.0, 1e-15) && p.z == 5.0);
    }

    #[test]
    fn wrap_angle_range() {
        for t in [-10.0, -PI, -1e-300, 0.0, PI, 3.5 * PI, 100.0] {
            let w = wrap_angle(t);
            assert!((-PI..PI).contains(&w), "{t} -> {w}");
        }
        assert_eq!(wrap_angle(PI), -PI);
    }

    fn cfg10() -> PartitionConfig {
        PartitionConfig::new((0.0, 50.0), (-5.0, 3.0), [10, 8, 4]).unwrap()
    }

    #[test]
    fn voxel_index_boundaries() {
        let cfg = cfg10();
        let lo = CylPoint { r: 0.0, theta: -PI, z: -5.0 };
        assert_eq!(cyl_to_voxel_index(lo, &cfg), Some([0, 0, 0]));
        let hi_r = CylPoint { r: 50.0, theta: 0.0, z: 0.0 };
        assert_eq!(cyl_to_voxel_index(hi_r, &cfg), None);
        let hi_z = CylPoint { r: 1.0, theta: 0.0, z: 3.0 };
        assert_eq!(cyl_to_voxel_index(hi_z, &cfg), None);
        let p = CylPoint { r: 12.5, theta: 0.0, z: 0.0 };
        assert_eq!(cyl_to_voxel_index(p, &cfg).unwrap()[0], 2);
        let just_below = CylPoint { r: 50.0f64.next_down(), theta: PI.next_down(), z: 3.0f64.next_down() };
        assert_eq!(cyl_to_voxel_index(just_below, &cfg), Some([9, 7, 3]));
    }

    #[test]
    fn partition_validation() {
        assert!(PartitionConfig::new((5.0, 5.0), (0.0, 1.0), [1, 1, 1]).is_err());
        assert!(PartitionConfig::new((0.0, 5.0), (1.0, 0.0), [1, 1, 1]).is_err());
        assert!(PartitionConfig::new((0.0, 5.0), (0.0, 1.0), [0, 1, 1]).is_err());
    }

    #[test]
    fn world_to_tpv_cell_centers() {
        let cfg = PartitionConfig::new((0.0, 48.0), (-4.0, 4.0), [48, 36, 8]).unwrap();
        let grid = TpvGridSpec::for_partition(&cfg, 2, 2).unwrap();
        for [i, j, k] in [[0usize, 0usize, 0usize], [5, 7, 3]] {
            let r = cfg.r_min + (i as f64 + 0.5) * cfg.dr();
            let t = -PI + (j as f64 + 0.5) * cfg.dtheta();
            let z = cfg.z_min + (k as f64 + 0.5) * cfg.dz();
            let p = cyl_to_cart(CylPoint { r, theta: t, z });
            let [h, w, d] = world_to_tpv(p, &cfg, &grid);
            assert!(close(h, i as f64, 1e-12) && close(w, j as f64, 1e-12) && close(d, k as f64, 1e-12));
        }
    }

    #[test]
    fn tpv_grid_divisibility() {
        let cfg = PartitionConfig::new((0.0, 48.0), (-4.0, 4.0), [480, 360, 32]).unwrap();
        let g = TpvGridSpec::for_partition(&cfg, 2, 2).unwrap();
        assert_eq!((g.cal_h, g.cal_w, g.cal_d), (240, 180, 16));
        assert_eq!(g.final_dims(), [480, 360, 32]);
        let odd = PartitionConfig::new((0.0, 48.0), (-4.0, 4.0), [49, 36, 8]).unwrap();
        assert!(TpvGridSpec::for_partition(&odd, 2, 2).is_err());
    }

    #[test]
    fn voxel_centers_on_benchmark_grid() {
        let g = GridSpec::occupancy_benchmark();
        let c = g.voxel_center([0, 0, 0]).unwrap();
        assert!(close(c.x, -51.1, 1e-12) && close(c.y, -51.1, 1e-12) && close(c.z, -4.9, 1e-12));
        let c = g.voxel_center([511, 511, 39]).unwrap();
        assert!(close(c.x, 51.1, 1e-12) && close(c.y, 51.1, 1e-12) && close(c.z, 2.9, 1e-12));
        let c = g.voxel_center([256, 256, 20]).unwrap();
        assert!(close(c.x, 0.1, 1e-12) && close(c.y, 0.1, 1e-12) && close(c.z, -0.9, 1e-12));
        // z = 0.1 is the center of layer 25: -5 + 25.5 * 0.2
        assert!(close(g.voxel_center([256, 256, 25]).unwrap().z, 0.1, 1e-12));
        assert!(g.voxel_center([512, 0, 0]).is_err());
        assert!(g.voxel_center([0, 0, 40]).is_err());
    }

    #[test]
    fn coarsen_keeps_extent() {
        let g = GridSpec::occupancy_benchmark();
        let c = g.coarsen(2).unwrap();
        assert_eq!(c.dims, [256, 256, 20]);
        assert_eq!(c.max_corner(), g.max_corner());
        assert!(g.coarsen(3).is_err());
    }
}
