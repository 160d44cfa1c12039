//! Deterministic synthetic LiDAR scenes with exact ground truth.
//!
//! A scene is a flat ground disc plus oriented boxes, vertical cylinders and
//! wall arcs (chains of thin boxes). A spinning sensor at the origin casts
//! rays against them; every voxel of the output grid that intersects a
//! primitive is labeled with the primitive's class.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CartPoint, GridSpec};
use crate::io::{OccupancyGrid, PointCloud, EMPTY_CLASS};

/// Slack added to every primitive in the voxel overlap test. Covers the f32
/// rounding of stored point positions.
const OVERLAP_EPS: f64 = 1e-4;

/// Ground class by radius: band `i` applies to voxel centers with radius
/// below `r_max` (unbounded when absent); the last band also covers every
/// larger radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundBand {
    #[serde(default)]
    pub r_max: Option<f64>,
    pub class: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundSpec {
    /// Requested ground height; snapped to the nearest voxel-layer center.
    pub z: f64,
    pub radius: f64,
    pub bands: Vec<GroundBand>,
}

/// `count` objects of one class with sizes drawn uniformly from the ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub count: usize,
    pub class: u16,
    pub length: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
    /// Radial placement range of the center.
    pub radius: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CylinderSpec {
    pub count: usize,
    pub class: u16,
    pub radius: (f64, f64),
    pub height: (f64, f64),
    pub placement: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WallSpec {
    pub count: usize,
    pub class: u16,
    /// Arc radius about the sensor.
    pub radius: (f64, f64),
    /// Angular span in radians.
    pub span: (f64, f64),
    pub thickness: f64,
    pub height: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    pub rays_per_ring: usize,
    /// Beam elevations in degrees.
    pub elevations_deg: Vec<f64>,
    pub max_range: f64,
    /// Standard deviation of the isotropic Gaussian position noise, meters.
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub seed: u64,
    /// Ground-truth occupancy grid.
    pub grid: GridSpec,
    pub ground: GroundSpec,
    #[serde(default)]
    pub boxes: Vec<BoxSpec>,
    #[serde(default)]
    pub cylinders: Vec<CylinderSpec>,
    #[serde(default)]
    pub walls: Vec<WallSpec>,
    pub sensor: SensorSpec,
    /// Minimum horizontal gap between object footprints, meters.
    pub clearance: f64,
}

impl SceneSpec {
    /// Six classes: 1 road, 2 sidewalk, 3 car, 4 pole, 5 building, 6 truck.
    pub fn urban(seed: u64, grid: GridSpec) -> Self {
        let half = grid.dims[0].min(grid.dims[1]) as f64 * grid.voxel_size / 2.0;
        let reach = half * 0.9;
        Self {
            seed,
            grid,
            ground: GroundSpec {
                z: -1.8,
                radius: half * 1.5,
                bands: vec![
                    GroundBand {
                        r_max: Some(reach * 0.45),
                        class: 1,
                    },
                    GroundBand {
                        r_max: None,
                        class: 2,
                    },
                ],
            },
            boxes: vec![
                BoxSpec {
                    count: 2,
                    class: 6,
                    length: (6.0, 8.0),
                    width: (2.4, 2.6),
                    height: (2.8, 3.2),
                    radius: (6.0, reach * 0.7),
                },
                BoxSpec {
                    count: 5,
                    class: 3,
                    length: (3.8, 4.6),
                    width: (1.7, 2.0),
                    height: (1.4, 1.7),
                    radius: (4.0, reach * 0.6),
                },
            ],
            cylinders: vec![CylinderSpec {
                count: 5,
                class: 4,
                radius: (0.3, 0.45),
                height: (3.0, 3.4),
                placement: (3.0, reach * 0.8),
            }],
            walls: vec![WallSpec {
                count: 2,
                class: 5,
                radius: (reach * 0.8, reach * 0.95),
                span: (0.6, 1.2),
                thickness: 0.6,
                height: (3.0, 3.4),
            }],
            sensor: SensorSpec {
                rays_per_ring: 360,
                elevations_deg: (0..16).map(|i| -24.0 + i as f64 * 1.8).collect(),
                max_range: half * 1.5,
                noise_sigma: 0.0,
            },
            clearance: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if !(self.sensor.noise_sigma >= 0.0) {
            return Err(Error::config("noise sigma must be non-negative"));
        }
        if self.sensor.rays_per_ring == 0 || self.sensor.elevations_deg.is_empty() {
            return Err(Error::config("sensor needs at least one ray"));
        }
        if self.ground.bands.is_empty() || self.ground.bands.iter().any(|b| b.class == EMPTY_CLASS) {
            return Err(Error::config("ground needs at least one band with a non-empty class"));
        }
        let classes = self
            .boxes
            .iter()
            .map(|b| b.class)
            .chain(self.cylinders.iter().map(|c| c.class))
            .chain(self.walls.iter().map(|w| w.class));
        if classes.clone().any(|c| c == EMPTY_CLASS) {
            return Err(Error::config("class 0 is reserved for empty voxels"));
        }
        let ranges = self
            .boxes
            .iter()
            .flat_map(|b| [b.length, b.width, b.height, b.radius])
            .chain(self.cylinders.iter().flat_map(|c| [c.radius, c.height, c.placement]))
            .chain(self.walls.iter().flat_map(|w| [w.radius, w.span, w.height]));
        for (lo, hi) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return Err(Error::config(format!("invalid size range ({lo}, {hi})")));
            }
        }
        Ok(())
    }

    /// Ground height snapped to the center of the voxel layer holding
    /// `ground.z`.
    pub fn ground_z(&self) -> f64 {
        let g = &self.grid;
        let k = ((self.ground.z - g.origin[2]) / g.voxel_size)
            .floor()
            .clamp(0.0, (g.dims[2] - 1) as f64);
        g.origin[2] + (k + 0.5) * g.voxel_size
    }

    pub fn ground_class(&self, r: f64) -> u16 {
        let bands = &self.ground.bands;
        bands
            .iter()
            .find(|b| b.r_max.is_none_or(|m| r < m))
            .unwrap_or(&bands[bands.len() - 1])
            .class
    }
}

/// Solid placed in the scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// Box rotated by `yaw` about the vertical axis.
    Box {
        center: [f64; 2],
        half: [f64; 2],
        yaw: f64,
        z: (f64, f64),
    },
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z: (f64, f64),
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub class: u16,
}

fn overlap_1d(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

impl Shape {
    /// Whether the closed shape, grown by `eps`, meets the axis-aligned box
    /// `[lo, hi]`.
    pub fn intersects_aabb(&self, lo: [f64; 3], hi: [f64; 3], eps: f64) -> bool {
        match *self {
            Shape::Box { center, half, yaw, z } => {
                if !overlap_1d((z.0 - eps, z.1 + eps), (lo[2], hi[2])) {
                    return false;
                }
                let (s, c) = yaw.sin_cos();
                let axes = [[1.0, 0.0], [0.0, 1.0], [c, s], [-s, c]];
                let aabb_c = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
                let aabb_h = [(hi[0] - lo[0]) / 2.0, (hi[1] - lo[1]) / 2.0];
                let obb_axes = [[c, s], [-s, c]];
                let h = [half[0] + eps, half[1] + eps];
                axes.iter().all(|ax| {
                    let d = (center[0] - aabb_c[0]) * ax[0] + (center[1] - aabb_c[1]) * ax[1];
                    let ra = aabb_h[0] * ax[0].abs() + aabb_h[1] * ax[1].abs();
                    let rb: f64 = (0..2)
                        .map(|i| h[i] * (obb_axes[i][0] * ax[0] + obb_axes[i][1] * ax[1]).abs())
                        .sum();
                    d.abs() <= ra + rb
                })
            }
            Shape::Cylinder { center, radius, z } => {
                if !overlap_1d((z.0 - eps, z.1 + eps), (lo[2], hi[2])) {
                    return false;
                }
                let qx = center[0].clamp(lo[0], hi[0]);
                let qy = center[1].clamp(lo[1], hi[1]);
                (center[0] - qx).hypot(center[1] - qy) <= radius + eps
            }
        }
    }

    /// Smallest positive ray parameter at which `o + t·d` enters the shape.
    pub fn ray_hit(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        match *self {
            Shape::Box { center, half, yaw, z } => {
                let (s, c) = yaw.sin_cos();
                let rel = [o[0] - center[0], o[1] - center[1]];
                let lo = [rel[0] * c + rel[1] * s, -rel[0] * s + rel[1] * c, o[2]];
                let ld = [d[0] * c + d[1] * s, -d[0] * s + d[1] * c, d[2]];
                let bounds = [(-half[0], half[0]), (-half[1], half[1]), z];
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                for a in 0..3 {
                    if ld[a].abs() < 1e-15 {
                        if lo[a] < bounds[a].0 || lo[a] > bounds[a].1 {
                            return None;
                        }
                    } else {
                        let ta = (bounds[a].0 - lo[a]) / ld[a];
                        let tb = (bounds[a].1 - lo[a]) / ld[a];
                        t0 = t0.max(ta.min(tb));
                        t1 = t1.min(ta.max(tb));
                    }
                }
                (t0 <= t1 && t0 > 0.0).then_some(t0)
            }
            Shape::Cylinder { center, radius, z } => {
                let (px, py) = (o[0] - center[0], o[1] - center[1]);
                let a = d[0] * d[0] + d[1] * d[1];
                let mut best: Option<f64> = None;
                if a > 1e-15 {
                    let b = px * d[0] + py * d[1];
                    let cc = px * px + py * py - radius * radius;
                    let disc = b * b - a * cc;
                    if disc >= 0.0 {
                        let t = (-b - disc.sqrt()) / a;
                        let hz = o[2] + t * d[2];
                        if t > 0.0 && hz >= z.0 && hz <= z.1 {
                            best = Some(t);
                        }
                    }
                }
                if d[2].abs() > 1e-15 {
                    for cap in [z.0, z.1] {
                        let t = (cap - o[2]) / d[2];
                        let (hx, hy) = (px + t * d[0], py + t * d[1]);
                        if t > 0.0 && hx * hx + hy * hy <= radius * radius && best.is_none_or(|b| t < b) {
                            best = Some(t);
                        }
                    }
                }
                best
            }
        }
    }

    /// Center and radius of a horizontal circle enclosing the footprint.
    fn footprint(&self) -> ([f64; 2], f64) {
        match *self {
            Shape::Box { center, half, .. } => (center, half[0].hypot(half[1])),
            Shape::Cylinder { center, radius, .. } => (center, radius),
        }
    }
}

/// Generated scene before it is split into cloud and grid.
#[derive(Debug, Clone)]
pub struct Scene {
    pub primitives: Vec<Primitive>,
    pub ground_z: f64,
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

const PLACEMENT_ATTEMPTS: usize = 64;

fn place_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng, ground_z: f64) -> Vec<Primitive> {
    let vs = spec.grid.voxel_size;
    // objects float a quarter voxel above the ground layer so they never
    // share a voxel with it
    let base = ground_z + 0.75 * vs;
    let mut placed: Vec<Primitive> = Vec::new();
    // groups of shapes placed together (wall segments)
    let try_place = |shapes: Vec<Shape>, class: u16, placed: &mut Vec<Primitive>| {
        let free = shapes.iter().all(|s| {
            let (c, r) = s.footprint();
            placed.iter().all(|p| {
                let (pc, pr) = p.shape.footprint();
                (c[0] - pc[0]).hypot(c[1] - pc[1]) >= r + pr + spec.clearance
            })
        });
        if free {
            placed.extend(shapes.into_iter().map(|shape| Primitive { shape, class }));
        }
        free
    };
    for w in &spec.walls {
        for _ in 0..w.count {
            for _ in 0..PLACEMENT_ATTEMPTS {
                let rho = uniform(rng, w.radius);
                let span = uniform(rng, w.span);
                let start = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let h = uniform(rng, w.height);
                let segs = ((rho * span) / 1.0).ceil().max(1.0) as usize;
                let dphi = span / segs as f64;
                let chord = 2.0 * rho * (dphi / 2.0).sin();
                let shapes = (0..segs)
                    .map(|i| {
                        let phi = start + (i as f64 + 0.5) * dphi;
                        Shape::Box {
                            center: [rho * phi.cos(), rho * phi.sin()],
                            half: [w.thickness / 2.0, chord / 2.0 + w.thickness / 2.0],
                            yaw: phi,
                            z: (base, base + h),
                        }
                    })
                    .collect();
                if try_place(shapes, w.class, &mut placed) {
                    break;
                }
            }
        }
    }
    for b in &spec.boxes {
        for _ in 0..b.count {
            for _ in 0..PLACEMENT_ATTEMPTS {
                let r = uniform(rng, b.radius);
                let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let shape = Shape::Box {
                    center: [r * phi.cos(), r * phi.sin()],
                    half: [uniform(rng, b.length) / 2.0, uniform(rng, b.width) / 2.0],
                    yaw: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
                    z: (base, base + uniform(rng, b.height)),
                };
                if try_place(vec![shape], b.class, &mut placed) {
                    break;
                }
            }
        }
    }
    for c in &spec.cylinders {
        for _ in 0..c.count {
            for _ in 0..PLACEMENT_ATTEMPTS {
                let r = uniform(rng, c.placement);
                let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                let shape = Shape::Cylinder {
                    center: [r * phi.cos(), r * phi.sin()],
                    radius: uniform(rng, c.radius),
                    z: (base, base + uniform(rng, c.height)),
                };
                if try_place(vec![shape], c.class, &mut placed) {
                    break;
                }
            }
        }
    }
    placed
}

pub fn build_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ground_z = spec.ground_z();
    let primitives = place_objects(spec, &mut rng, ground_z);
    Ok(Scene { primitives, ground_z })
}

/// Occupancy of `scene` on `spec.grid`: ground voxels by center radius,
/// then every voxel meeting a primitive.
pub fn rasterize(spec: &SceneSpec, scene: &Scene) -> OccupancyGrid {
    let grid = spec.grid;
    let mut occ = OccupancyGrid::empty(grid);
    let vs = grid.voxel_size;
    let [nx, ny, nz] = grid.dims;
    let kg = ((scene.ground_z - grid.origin[2]) / vs).floor() as usize;
    for i in 0..nx {
        for j in 0..ny {
            let lo = [grid.origin[0] + i as f64 * vs, grid.origin[1] + j as f64 * vs];
            let hi = [lo[0] + vs, lo[1] + vs];
            let q = [0.0f64.clamp(lo[0], hi[0]), 0.0f64.clamp(lo[1], hi[1])];
            if q[0].hypot(q[1]) <= spec.ground.radius + OVERLAP_EPS && kg < nz {
                let c = grid.center_unchecked([i, j, kg]);
                occ.set([i, j, kg], spec.ground_class(c.x.hypot(c.y)));
            }
        }
    }
    for p in &scene.primitives {
        let (center, rad) = p.shape.footprint();
        let (z0, z1) = match p.shape {
            Shape::Box { z, .. } | Shape::Cylinder { z, .. } => z,
        };
        let range = |a: usize, lo: f64, hi: f64| {
            let f = |v: f64| ((v - grid.origin[a]) / vs).floor().clamp(0.0, (grid.dims[a] - 1) as f64) as usize;
            f(lo - OVERLAP_EPS)..=f(hi + OVERLAP_EPS)
        };
        for i in range(0, center[0] - rad, center[0] + rad) {
            for j in range(1, center[1] - rad, center[1] + rad) {
                for k in range(2, z0, z1) {
                    let lo = [0, 1, 2].map(|a| grid.origin[a] + [i, j, k][a] as f64 * vs);
                    let hi = lo.map(|v| v + vs);
                    if p.shape.intersects_aabb(lo, hi, OVERLAP_EPS) {
                        occ.set([i, j, k], p.class);
                    }
                }
            }
        }
    }
    occ
}

/// Ray-casts the sensor against the scene; returns positions, intensities
/// and labels of points that land inside the grid.
fn cast(spec: &SceneSpec, scene: &Scene, occ: &OccupancyGrid) -> (Vec<[f64; 3]>, Vec<f32>, Vec<u16>) {
    let s = &spec.sensor;
    let (mut pos, mut inten, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for &elev in &s.elevations_deg {
        let e = elev.to_radians();
        for a in 0..s.rays_per_ring {
            let az = -std::f64::consts::PI + (a as f64 + 0.5) * std::f64::consts::TAU / s.rays_per_ring as f64;
            let d = [e.cos() * az.cos(), e.cos() * az.sin(), e.sin()];
            let o = [0.0; 3];
            let mut best: Option<(f64, Option<u16>)> = None;
            if d[2] < 0.0 {
                let t = scene.ground_z / d[2];
                if t > 0.0 && (t * d[0]).hypot(t * d[1]) <= spec.ground.radius {
                    best = Some((t, None));
                }
            }
            for p in &scene.primitives {
                if let Some(t) = p.shape.ray_hit(o, d) {
                    if best.is_none_or(|(b, _)| t < b) {
                        best = Some((t, Some(p.class)));
                    }
                }
            }
            let Some((t, class)) = best else { continue };
            if t > s.max_range {
                continue;
            }
            let hit = [t * d[0], t * d[1], t * d[2]];
            let stored = hit.map(|v| v as f32);
            let p = CartPoint::new(stored[0] as f64, stored[1] as f64, stored[2] as f64);
            let Some(vox) = occ.spec.voxel_of(p) else { continue };
            let label = match class {
                Some(c) => c,
                // ground points take the class of the voxel they fall in
                None => occ.get(vox),
            };
            pos.push(hit);
            inten.push((0.1 + 0.8 * (1.0 - t / s.max_range)) as f32);
            labels.push(label);
        }
    }
    (pos, inten, labels)
}

/// Builds a scene, its ground-truth occupancy and the sensor sweep. Noise is
/// added after labeling.
pub fn gen_synthetic_scene(spec: &SceneSpec) -> Result<(PointCloud, OccupancyGrid)> {
    let scene = build_scene(spec)?;
    let occ = rasterize(spec, &scene);
    let (pos, inten, labels) = cast(spec, &scene, &occ);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x6e6f_6973_65);
    let noise = Normal::new(0.0, spec.sensor.noise_sigma).map_err(|e| Error::config(e.to_string()))?;
    let positions = pos
        .into_iter()
        .map(|p| {
            if spec.sensor.noise_sigma > 0.0 {
                p.map(|v| (v + noise.sample(&mut rng)) as f32)
            } else {
                p.map(|v| v as f32)
            }
        })
        .collect();
    let pc = PointCloud::new(positions, inten, Some(labels))?;
    Ok((pc, occ))
}

/// Indices of points whose voxel in `occ` is missing or has another class.
pub fn inconsistent_points(pc: &PointCloud, occ: &OccupancyGrid) -> Vec<usize> {
    let Some(labels) = &pc.labels else {
        return Vec::new();
    };
    (0..pc.len())
        .filter(|&i| match occ.spec.voxel_of(pc.point(i)) {
            Some(v) => occ.get(v) != labels[i],
            None => true,
        })
        .collect()
}
