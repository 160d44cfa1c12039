//! Evaluation of point segmentation and occupancy predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::OccupancyInference;
use crate::io::{OccupancyGrid, PointCloud};
use crate::metrics::{ConfusionMatrix, MiouReport};
use crate::model::Model;
use crate::train::Sample;

/// Source of predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "class")]
pub enum Predictor {
    Model,
    /// Ground truth as prediction.
    Oracle,
    /// The same class everywhere.
    Constant(u16),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegReport {
    pub predictor: Predictor,
    pub scenes: usize,
    pub points: usize,
    /// `per_class[i]` is the IoU of label `i + 1`.
    pub miou: MiouReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OccReport {
    pub predictor: Predictor,
    pub scenes: usize,
    pub voxels: usize,
    /// Semantic classes only; `per_class[i]` is label `i + 1`.
    pub miou: MiouReport,
    /// Occupied-vs-empty IoU over all scenes.
    pub iou: f64,
}

/// Drops class 0 from a report over `empty + classes`.
fn semantic_only(cm: &ConfusionMatrix) -> MiouReport {
    let full = cm.miou();
    let per_class: Vec<Option<f64>> = full.per_class[1..].to_vec();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    MiouReport {
        excluded: per_class
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_none())
            .map(|(i, _)| i)
            .collect(),
        miou: if valid.is_empty() {
            0.0
        } else {
            valid.iter().sum::<f64>() / valid.len() as f64
        },
        per_class,
    }
}

fn labels(pc: &PointCloud, i: usize) -> Result<&[u16]> {
    pc.labels
        .as_deref()
        .ok_or_else(|| Error::Data(format!("scene {i} has no point labels")))
}

/// Point-segmentation mIoU over all scenes. Unlabeled points are skipped.
pub fn eval_seg(model: Option<&Model>, data: &[Sample], num_classes: usize, predictor: Predictor) -> Result<SegReport> {
    let mut cm = ConfusionMatrix::new(num_classes);
    let mut points = 0;
    for (i, s) in data.iter().enumerate() {
        let gt = labels(&s.cloud, i)?;
        let pred: Vec<u16> = match predictor {
            Predictor::Model => model
                .ok_or_else(|| Error::config("model predictor needs a checkpoint"))?
                .predict_points(&s.cloud)?,
            Predictor::Oracle => gt.to_vec(),
            Predictor::Constant(c) => vec![c; gt.len()],
        };
        let to_idx = |l: u16| if l == 0 { usize::MAX } else { l as usize - 1 };
        let g: Vec<usize> = gt.iter().map(|&l| to_idx(l)).collect();
        let p: Vec<usize> = pred.iter().map(|&l| to_idx(l)).collect();
        if let Some(j) = (0..g.len()).find(|&j| g[j] != usize::MAX && p[j] == usize::MAX) {
            return Err(Error::Data(format!("scene {i}: point {j} predicted as unlabeled")));
        }
        cm.accumulate(&g, &p, usize::MAX)?;
        points += g.iter().filter(|&&v| v != usize::MAX).count();
    }
    Ok(SegReport {
        predictor,
        scenes: data.len(),
        points,
        miou: cm.miou(),
    })
}

/// Occupancy mIoU and geometric IoU over all scenes. Returns the report and
/// the predicted grids.
pub fn eval_occ(
    model: Option<&Model>,
    data: &[Sample],
    num_classes: usize,
    predictor: Predictor,
    inf: &OccupancyInference,
) -> Result<(OccReport, Vec<OccupancyGrid>)> {
    let mut cm = ConfusionMatrix::new(num_classes + 1);
    let (mut tp, mut union) = (0u64, 0u64);
    let mut preds = Vec::with_capacity(data.len());
    let mut voxels = 0;
    for (i, s) in data.iter().enumerate() {
        let gt = s
            .occupancy
            .as_ref()
            .ok_or_else(|| Error::Data(format!("scene {i} has no occupancy grid")))?;
        let pred = match predictor {
            Predictor::Model => model
                .ok_or_else(|| Error::config("model predictor needs a checkpoint"))?
                .predict_occupancy(&s.cloud, inf)?,
            Predictor::Oracle => gt.clone(),
            Predictor::Constant(c) => OccupancyGrid {
                spec: gt.spec,
                values: vec![c; gt.values.len()],
            },
        };
        if pred.spec.dims != gt.spec.dims {
            return Err(Error::config(format!(
                "prediction dims {:?} differ from ground truth {:?}",
                pred.spec.dims, gt.spec.dims
            )));
        }
        let g: Vec<usize> = gt.values.iter().map(|&v| v as usize).collect();
        let p: Vec<usize> = pred.values.iter().map(|&v| v as usize).collect();
        cm.accumulate(&g, &p, usize::MAX)?;
        for (&a, &b) in g.iter().zip(&p) {
            tp += (a != 0 && b != 0) as u64;
            union += (a != 0 || b != 0) as u64;
        }
        voxels += g.len();
        preds.push(pred);
    }
    Ok((
        OccReport {
            predictor,
            scenes: data.len(),
            voxels,
            miou: semantic_only(&cm),
            iou: if union == 0 { 1.0 } else { tp as f64 / union as f64 },
        },
        preds,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;

    fn sample(labels: Vec<u16>, occ: Vec<u16>) -> Sample {
        let n = labels.len();
        Sample {
            cloud: PointCloud::new(vec![[1.0, 0.0, 0.0]; n], vec![0.5; n], Some(labels)).unwrap(),
            occupancy: Some(OccupancyGrid {
                spec: GridSpec {
                    dims: [occ.len(), 1, 1],
                    origin: [0.0; 3],
                    voxel_size: 1.0,
                },
                values: occ,
            }),
        }
    }

    #[test]
    fn oracle_is_perfect() {
        let data = [sample(vec![1, 2, 2, 3], vec![0, 1, 3])];
        let r = eval_seg(None, &data, 3, Predictor::Oracle).unwrap();
        assert_eq!(r.miou.miou, 1.0);
        let inf = OccupancyInference {
            coarse: data[0].occupancy.as_ref().unwrap().spec,
            factor: 1,
            memory_cap: usize::MAX,
        };
        let (o, _) = eval_occ(None, &data, 3, Predictor::Oracle, &inf).unwrap();
        assert_eq!((o.miou.miou, o.iou), (1.0, 1.0));
        assert_eq!(o.miou.excluded, vec![1]);
    }

    #[test]
    fn constant_predictor_hand_tally() {
        // gt: three of class 1, one of class 2, predict all 1:
        // IoU1 = 3/4, IoU2 = 0/1 -> mIoU 0.375
        let data = [sample(vec![1, 1, 2, 1], vec![0, 2, 2, 1])];
        let r = eval_seg(None, &data, 2, Predictor::Constant(1)).unwrap();
        assert!((r.miou.miou - 0.375).abs() < 1e-12);
        let inf = OccupancyInference {
            coarse: data[0].occupancy.as_ref().unwrap().spec,
            factor: 1,
            memory_cap: usize::MAX,
        };
        // predicting class 2 everywhere: semantic IoU2 = 2/4, IoU1 = 0/1,
        // geometric IoU = 3/4
        let (o, preds) = eval_occ(None, &data, 2, Predictor::Constant(2), &inf).unwrap();
        assert!((o.miou.miou - 0.25).abs() < 1e-12);
        assert!((o.iou - 0.75).abs() < 1e-12);
        assert_eq!(preds[0].values, vec![2; 4]);
    }
}
