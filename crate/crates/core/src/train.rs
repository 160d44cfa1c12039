//! Training loop for point segmentation and occupancy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GridSpec;
use crate::io::{OccupancyGrid, PointCloud, EMPTY_CLASS};
use crate::loss::{ce_lovasz, NO_IGNORE};
use crate::model::Model;
use crate::query::DEFAULT_MEMORY_CAP;
use crate::tensor::{
    adam_step, finite_diff_check, AdamConfig, AdamState, BoundParams, GradCheckOptions, GradCheckReport, Graph, LrSchedule,
    Tensor, Var,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Lidarseg,
    Occupancy,
    Both,
}

impl Task {
    pub fn lidarseg(self) -> bool {
        matches!(self, Task::Lidarseg | Task::Both)
    }

    pub fn occupancy(self) -> bool {
        matches!(self, Task::Occupancy | Task::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub steps: u64,
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_steps: u64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Scenes per step; the loss is their mean.
    #[serde(default = "one")]
    pub batch_size: usize,
    /// Glob patterns of parameters to freeze.
    #[serde(default)]
    pub freeze: Vec<String>,
    /// Occupancy is supervised on the ground-truth grid coarsened by this
    /// factor.
    #[serde(default = "one")]
    pub occ_factor: usize,
    #[serde(default = "default_lovasz")]
    pub lovasz_weight: f64,
}

fn one() -> usize {
    1
}

fn default_lovasz() -> f64 {
    1.0
}

impl TrainConfig {
    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.occ_factor == 0 {
            return Err(Error::config("batch size and occupancy factor must be positive"));
        }
        if !(self.lovasz_weight.is_finite() && self.lovasz_weight >= 0.0) {
            return Err(Error::config("lovasz weight must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One training scene.
#[derive(Debug, Clone)]
pub struct Sample {
    pub cloud: PointCloud,
    pub occupancy: Option<OccupancyGrid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    /// Sum of the cross-entropy terms of the active tasks.
    pub ce: f64,
    pub lovasz: f64,
    pub total: f64,
}

/// Coarse supervision grid: each coarse voxel takes the most frequent
/// non-empty class among its fine voxels (ties to the lowest class), or
/// empty if none is occupied.
pub fn coarse_labels(grid: &OccupancyGrid, factor: usize) -> Result<(GridSpec, Vec<u16>)> {
    let coarse = grid.spec.coarsen(factor)?;
    let [cx, cy, cz] = coarse.dims;
    let max_class = grid.values.iter().copied().max().unwrap_or(0) as usize;
    let mut counts = vec![0u32; max_class + 1];
    let mut out = Vec::with_capacity(coarse.num_voxels());
    for i in 0..cx {
        for j in 0..cy {
            for k in 0..cz {
                counts.iter_mut().for_each(|c| *c = 0);
                for a in 0..factor {
                    for b in 0..factor {
                        for c in 0..factor {
                            let v = grid.get([i * factor + a, j * factor + b, k * factor + c]);
                            counts[v as usize] += 1;
                        }
                    }
                }
                let mut best = EMPTY_CLASS as usize;
                for (cls, &n) in counts.iter().enumerate().skip(1) {
                    if n > 0 && (best == EMPTY_CLASS as usize || n > counts[best]) {
                        best = cls;
                    }
                }
                out.push(best as u16);
            }
        }
    }
    Ok((coarse, out))
}

/// Point labels as head indices; unlabeled points (label 0) are ignored.
pub fn point_targets(pc: &PointCloud) -> Result<Vec<usize>> {
    let labels = pc
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("training cloud has no labels".into()))?;
    Ok(labels
        .iter()
        .map(|&l| if l == 0 { NO_IGNORE } else { l as usize - 1 })
        .collect())
}

struct Prepared {
    cloud: PointCloud,
    points: Option<Vec<usize>>,
    voxels: Option<(GridSpec, Vec<usize>)>,
}

fn prepare(model: &Model, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<Prepared>> {
    let n = model.config.num_classes;
    data.iter()
        .enumerate()
        .map(|(i, s)| {
            let points = if cfg.task.lidarseg() {
                s.cloud.validate_labels(n)?;
                Some(point_targets(&s.cloud)?)
            } else {
                None
            };
            let voxels = if cfg.task.occupancy() {
                let occ = s
                    .occupancy
                    .as_ref()
                    .ok_or_else(|| Error::Data(format!("scene {i} has no occupancy grid")))?;
                if let Some(v) = occ.values.iter().find(|&&v| v as usize > n) {
                    return Err(Error::Data(format!("scene {i}: occupancy class {v} exceeds {n}")));
                }
                let (spec, labels) = coarse_labels(occ, cfg.occ_factor)?;
                Some((spec, labels.into_iter().map(usize::from).collect()))
            } else {
                None
            };
            Ok(Prepared {
                cloud: s.cloud.clone(),
                points,
                voxels,
            })
        })
        .collect()
}

/// Loss of one scene: the sum over active tasks of `CE + w·Lovász`. Also
/// returns the summed CE and Lovász values.
fn sample_loss(model: &Model, g: &Graph, p: &BoundParams, s: &Prepared, w: f64) -> Result<(Var, f64, f64)> {
    let planes = model.planes(g, p, &s.cloud)?;
    let mut terms = Vec::new();
    if let Some(t) = &s.points {
        let logits = model.point_logits(g, p, &s.cloud, &planes)?;
        terms.push(ce_lovasz(g, logits, t, NO_IGNORE)?);
    }
    if let Some((spec, t)) = &s.voxels {
        let logits = model.voxel_logits(g, p, &planes, spec, DEFAULT_MEMORY_CAP)?;
        terms.push(ce_lovasz(g, logits, t, NO_IGNORE)?);
    }
    let (mut ce_sum, mut lz_sum) = (0.0, 0.0);
    let mut total: Option<Var> = None;
    for (ce, lz) in terms {
        ce_sum += g.value(ce).item();
        lz_sum += g.value(lz).item();
        let l = g.add(ce, g.scale(lz, w))?;
        total = Some(match total {
            None => l,
            Some(t) => g.add(t, l)?,
        });
    }
    Ok((total.expect("at least one task"), ce_sum, lz_sum))
}

/// Finite-difference check of the full training loss of one scene with
/// respect to every trainable parameter of `model`.
pub fn loss_gradcheck(model: &Model, sample: &Sample, cfg: &TrainConfig, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    cfg.validate()?;
    let prepared = prepare(model, std::slice::from_ref(sample), cfg)?.remove(0);
    let trainable: Vec<usize> = model.store.iter().enumerate().filter(|(_, p)| !p.frozen).map(|(i, _)| i).collect();
    let inputs: Vec<Tensor> = trainable.iter().map(|&i| model.store.iter().nth(i).unwrap().value.clone()).collect();
    finite_diff_check(
        |g, vars| {
            let mut bound: Vec<Var> = model.store.iter().map(|p| g.constant(p.value.clone())).collect();
            for (&i, &v) in trainable.iter().zip(vars) {
                bound[i] = v;
            }
            let p = BoundParams::from_vars(bound);
            Ok(sample_loss(model, g, &p, &prepared, cfg.lovasz_weight)?.0)
        },
        &inputs,
        opts,
    )
}

/// Mean over scenes of the point cross-entropy of `model`.
pub fn mean_point_ce(model: &Model, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("no scenes to evaluate".into()));
    }
    let mut total = 0.0;
    for s in data {
        let g = Graph::inference();
        let p = model.store.bind(&g);
        let planes = model.planes(&g, &p, &s.cloud)?;
        let logits = model.point_logits(&g, &p, &s.cloud, &planes)?;
        let ce = crate::loss::cross_entropy(&g, logits, &point_targets(&s.cloud)?, NO_IGNORE)?;
        total += g.value(ce).item();
    }
    Ok(total / data.len() as f64)
}

/// Trains `model` in place. Step `t` uses scenes `t·b .. t·b + b` (modulo the
/// dataset size). `on_step` sees every step's losses as they happen.
pub fn train(
    model: &mut Model,
    data: &[Sample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if data.is_empty() && cfg.steps > 0 {
        return Err(Error::Data("training set is empty".into()));
    }
    if !cfg.freeze.is_empty() {
        model.store.freeze(&cfg.freeze)?;
    }
    let prepared = prepare(model, data, cfg)?;
    let schedule = cfg.schedule();
    let mut state = AdamState::new(&model.store, cfg.adam);
    let mut logs = Vec::with_capacity(cfg.steps as usize);
    let scale = 1.0 / cfg.batch_size as f64;
    for step in 0..cfg.steps {
        let g = Graph::new();
        let p = model.store.bind(&g);
        let (mut ce_sum, mut lz_sum) = (0.0, 0.0);
        let mut total = None;
        for b in 0..cfg.batch_size {
            let s = &prepared[(step as usize * cfg.batch_size + b) % prepared.len()];
            let (l, ce, lz) = sample_loss(model, &g, &p, s, cfg.lovasz_weight)?;
            ce_sum += ce * scale;
            lz_sum += lz * scale;
            let l = g.scale(l, scale);
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        let total = total.expect("at least one loss term");
        let total_value = g.value(total).item();
        if !total_value.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step} is {total_value}")));
        }
        let mut grads = g.backward(total)?;
        let grads = model.store.collect_grads(&p, &mut grads);
        drop(g);
        let lr = schedule.at(step);
        adam_step(&mut model.store, &grads, &mut state, lr)?;
        let log = StepLog {
            step,
            lr,
            ce: ce_sum,
            lovasz: lz_sum,
            total: total_value,
        };
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;

    #[test]
    fn coarse_majority() {
        let spec = GridSpec {
            dims: [2, 2, 4],
            origin: [0.0; 3],
            voxel_size: 1.0,
        };
        let mut g = OccupancyGrid::empty(spec);
        g.set([0, 0, 0], 3);
        g.set([1, 1, 1], 2);
        g.set([0, 1, 1], 2);
        g.set([1, 0, 2], 5);
        let (c, v) = coarse_labels(&g, 2).unwrap();
        assert_eq!(c.dims, [1, 1, 2]);
        assert_eq!(v, vec![2, 5]);
        let mut g = OccupancyGrid::empty(spec);
        g.set([0, 0, 0], 4);
        g.set([0, 0, 1], 1);
        assert_eq!(coarse_labels(&g, 2).unwrap().1, vec![1, 0]);
    }
}
