//! Confusion matrices, IoU metrics and the TPV/voxel cell-count comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PartitionConfig;
use crate::io::{OccupancyGrid, EMPTY_CLASS};

/// `classes × classes` counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::shape(format!(
                "{} counts for a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per `(gt, pred)` pair, skipping rows whose ground truth
    /// equals `ignore`.
    pub fn accumulate(&mut self, gt: &[usize], pred: &[usize], ignore: usize) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::shape(format!(
                "accumulate: {} labels vs {} predictions",
                gt.len(),
                pred.len()
            )));
        }
        let n = self.classes;
        if let Some(i) = (0..gt.len()).find(|&i| gt[i] != ignore && (gt[i] >= n || pred[i] >= n)) {
            return Err(Error::Data(format!(
                "label pair ({}, {}) at {i} out of range for {n} classes",
                gt[i], pred[i]
            )));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g != ignore {
                self.counts[g * n + p] += 1;
            }
        }
        Ok(())
    }

    /// Elementwise sum of two shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("merge: class counts differ"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` where the denominator is 0.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let n = self.classes;
        (0..n)
            .map(|k| {
                let tp = self.get(k, k);
                let fn_: u64 = (0..n).filter(|&p| p != k).map(|p| self.get(k, p)).sum();
                let fp: u64 = (0..n).filter(|&g| g != k).map(|g| self.get(g, k)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> MiouReport {
        let per_class = self.iou();
        let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if valid.is_empty() {
            0.0
        } else {
            valid.iter().sum::<f64>() / valid.len() as f64
        };
        MiouReport {
            excluded: per_class
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_none())
                .map(|(i, _)| i)
                .collect(),
            per_class,
            miou,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    /// `null` for classes that never occur in ground truth or prediction.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    /// Classes left out of the mean.
    pub excluded: Vec<usize>,
}

/// Occupied-vs-empty IoU of two grids with equal dims. 1 when both are empty.
pub fn geometry_iou(gt: &OccupancyGrid, pred: &OccupancyGrid) -> Result<f64> {
    if gt.spec.dims != pred.spec.dims || gt.values.len() != pred.values.len() {
        return Err(Error::shape(format!(
            "geometry_iou: dims {:?} vs {:?}",
            gt.spec.dims, pred.spec.dims
        )));
    }
    let (mut tp, mut union) = (0u64, 0u64);
    for (&a, &b) in gt.values.iter().zip(&pred.values) {
        let (a, b) = (a != EMPTY_CLASS, b != EMPTY_CLASS);
        tp += (a && b) as u64;
        union += (a || b) as u64;
    }
    Ok(if union == 0 { 1.0 } else { tp as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellCount {
    pub tpv_cells: usize,
    pub voxel_cells: usize,
    pub ratio: f64,
}

/// Cells of the three planes `HW + WD + DH` against the full `HWD` grid.
pub fn cell_count(cfg: &PartitionConfig) -> CellCount {
    let (h, w, d) = (cfg.h, cfg.w, cfg.d);
    let tpv = h * w + w * d + d * h;
    let vox = h * w * d;
    CellCount {
        tpv_cells: tpv,
        voxel_cells: vox,
        ratio: vox as f64 / tpv as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;

    #[test]
    fn diagonal_and_empty() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2], usize::MAX).unwrap();
        assert_eq!((cm.get(2, 2), cm.get(0, 1)), (2, 0));
        let r = cm.miou();
        assert_eq!(r.miou, 1.0);
        let before = cm.clone();
        cm.accumulate(&[], &[], usize::MAX).unwrap();
        assert_eq!(cm, before);
        assert!(cm.accumulate(&[3], &[0], usize::MAX).is_err());
    }

    #[test]
    fn hand_evaluated_two_class() {
        let cm = ConfusionMatrix::from_counts(2, vec![3, 1, 2, 4]).unwrap();
        let r = cm.miou();
        assert_eq!(r.per_class, vec![Some(0.5), Some(4.0 / 7.0)]);
        assert!((r.miou - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_denominator_excluded() {
        let cm = ConfusionMatrix::from_counts(3, vec![2, 0, 0, 0, 0, 0, 0, 0, 0]).unwrap();
        let r = cm.miou();
        assert_eq!(r.miou, 1.0);
        assert_eq!(r.excluded, vec![1, 2]);
    }

    fn grid(vals: &[u16]) -> OccupancyGrid {
        OccupancyGrid {
            spec: GridSpec {
                dims: [vals.len(), 1, 1],
                origin: [0.0; 3],
                voxel_size: 1.0,
            },
            values: vals.to_vec(),
        }
    }

    #[test]
    fn geometry_iou_cases() {
        assert_eq!(geometry_iou(&grid(&[0, 1, 2]), &grid(&[0, 3, 1])).unwrap(), 1.0);
        assert_eq!(geometry_iou(&grid(&[1, 0]), &grid(&[0, 1])).unwrap(), 0.0);
        assert!(geometry_iou(&grid(&[1]), &grid(&[1, 0])).is_err());
    }

    #[test]
    fn cell_counts() {
        let c = cell_count(&PartitionConfig::new((0.0, 1.0), (0.0, 1.0), [2, 2, 2]).unwrap());
        assert_eq!((c.tpv_cells, c.voxel_cells), (12, 8));
        let c = cell_count(&PartitionConfig::new((0.0, 1.0), (0.0, 1.0), [1, 1, 1]).unwrap());
        assert_eq!((c.tpv_cells, c.voxel_cells), (3, 1));
    }
}
