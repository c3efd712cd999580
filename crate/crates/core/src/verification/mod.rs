//! Occupancy metrics, the finite-difference oracle, and brute-force reference
//! implementations used to check the optimized code paths.

mod gradients;
mod oracles;

pub use gradients::{
    gradient_suite, run_gradient_suites, GradientOp, GradientReport, ERROR_FLOOR, FD_STEP, GRADIENT_TOLERANCE,
    KINK_MARGIN,
};
pub use oracles::{
    attention_transcript_suite, dense_reference_conv, random_scene, sparse_conv_oracle_suite, splat_oracle_suite,
    OracleReport, SplatOracleReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{GaussianSet, Label};
use crate::splatter::{LabelGrid, SemanticVoxelGrid, VoxelGridSpec};

/// Per-class intersection and union counts plus the binary occupied score.
/// Voxels labeled unknown in either grid are skipped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    /// Voxels of each class in the prediction.
    pub pred_support: Vec<u64>,
    /// Voxels of each class in the ground truth.
    pub gt_support: Vec<u64>,
    pub occupied_intersection: u64,
    pub occupied_union: u64,
    pub scored: u64,
    pub masked: u64,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            pred_support: vec![0; num_classes],
            gt_support: vec![0; num_classes],
            occupied_intersection: 0,
            occupied_union: 0,
            scored: 0,
            masked: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.intersection.len()
    }

    /// Adds one pair of grids. Class ids at or above the accumulator's class
    /// count are a usage error.
    pub fn add(&mut self, pred: &LabelGrid, gt: &LabelGrid) -> Result<()> {
        if pred.spec != gt.spec {
            return Err(Error::Usage(
                "prediction and ground truth have different grid specs".into(),
            ));
        }
        let c = self.num_classes();
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if p == Label::Unknown || g == Label::Unknown {
                self.masked += 1;
                continue;
            }
            self.scored += 1;
            let (pc, gc) = (p.class(), g.class());
            for k in [pc, gc].into_iter().flatten() {
                if k >= c {
                    return Err(Error::Usage(format!("class {k} outside the {c} scored classes")));
                }
            }
            if let Some(k) = pc {
                self.pred_support[k] += 1;
                self.union[k] += 1;
            }
            if let Some(k) = gc {
                self.gt_support[k] += 1;
                if pc != Some(k) {
                    self.union[k] += 1;
                }
            }
            if let (Some(a), Some(b)) = (pc, gc) {
                if a == b {
                    self.intersection[a] += 1;
                }
            }
            match (p.is_occupied(), g.is_occupied()) {
                (true, true) => {
                    self.occupied_intersection += 1;
                    self.occupied_union += 1;
                }
                (true, false) | (false, true) => self.occupied_union += 1,
                (false, false) => {}
            }
        }
        Ok(())
    }

    /// Combines counts from another shard.
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::Usage(
                "cannot merge accumulators with different class counts".into(),
            ));
        }
        let add = |a: &mut Vec<u64>, b: &Vec<u64>| a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        add(&mut self.intersection, &other.intersection);
        add(&mut self.union, &other.union);
        add(&mut self.pred_support, &other.pred_support);
        add(&mut self.gt_support, &other.gt_support);
        self.occupied_intersection += other.occupied_intersection;
        self.occupied_union += other.occupied_union;
        self.scored += other.scored;
        self.masked += other.masked;
        Ok(())
    }

    /// `|A ∩ B| / |A ∪ B|`; 1 when the class is absent from both.
    pub fn iou(&self, k: usize) -> f64 {
        ratio(self.intersection[k], self.union[k])
    }

    /// Whether class `k` occurs in either grid.
    pub fn is_present(&self, k: usize) -> bool {
        self.union[k] > 0
    }

    /// Mean IoU over `classes`, skipping classes absent from both grids;
    /// 1 when every listed class is absent.
    pub fn miou(&self, classes: &[usize]) -> f64 {
        let present: Vec<f64> = classes
            .iter()
            .filter(|&&k| self.is_present(k))
            .map(|&k| self.iou(k))
            .collect();
        if present.is_empty() {
            1.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }

    /// Occupied-versus-empty IoU.
    pub fn sc_iou(&self) -> f64 {
        ratio(self.occupied_intersection, self.occupied_union)
    }

    /// IoU per class, `None` for classes absent from both grids.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes())
            .map(|k| self.is_present(k).then(|| self.iou(k)))
            .collect()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn class_bound(pred: &LabelGrid, gt: &LabelGrid) -> usize {
    pred.labels
        .iter()
        .chain(&gt.labels)
        .filter_map(|l| l.class())
        .max()
        .map_or(0, |k| k + 1)
}

fn accumulate(pred: &LabelGrid, gt: &LabelGrid, num_classes: usize) -> Result<ConfusionAccumulator> {
    let mut acc = ConfusionAccumulator::new(num_classes);
    acc.add(pred, gt)?;
    Ok(acc)
}

/// IoU of class `k` between two label grids.
pub fn iou(pred: &LabelGrid, gt: &LabelGrid, k: usize) -> Result<f64> {
    let acc = accumulate(pred, gt, class_bound(pred, gt).max(k + 1))?;
    Ok(acc.iou(k))
}

/// Mean IoU over `classes`, excluding classes absent from both grids.
pub fn miou(pred: &LabelGrid, gt: &LabelGrid, classes: &[usize]) -> Result<f64> {
    let c = classes
        .iter()
        .map(|k| k + 1)
        .max()
        .unwrap_or(0)
        .max(class_bound(pred, gt));
    Ok(accumulate(pred, gt, c)?.miou(classes))
}

/// Binary occupied-versus-empty IoU.
pub fn sc_iou(pred: &LabelGrid, gt: &LabelGrid) -> Result<f64> {
    Ok(accumulate(pred, gt, class_bound(pred, gt))?.sc_iou())
}

/// Central-difference gradient with per-coordinate step `h·max(1, |xᵢ|)`.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let step = h * x[i].abs().max(1.0);
        probe[i] = x[i] + step;
        let fp = f(&probe);
        probe[i] = x[i] - step;
        let fm = f(&probe);
        probe[i] = x[i];
        for (value, at) in [(fp, x[i] + step), (fm, x[i] - step)] {
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    coordinate: i,
                    value: at,
                });
            }
        }
        grad.push((fp - fm) / (2.0 * step));
    }
    Ok(grad)
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied())
        .max(norm(&mut b.iter().copied()))
        .max(floor);
    diff / scale
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Every Gaussian evaluated at every voxel center with no cutoff, summed with
/// compensation.
pub fn dense_reference_splat(set: &GaussianSet, spec: &VoxelGridSpec) -> SemanticVoxelGrid {
    let c = set.num_classes();
    let prepared: Vec<_> = set.iter().map(|g| g.prepare()).collect();
    let mut grid = SemanticVoxelGrid::zeros(*spec, c);
    let mut sums = vec![CompensatedSum::default(); c];
    for idx in spec.indices() {
        let center = spec.center(idx);
        sums.iter_mut().for_each(|s| *s = CompensatedSum::default());
        for g in &prepared {
            let k = (-0.5 * g.mahalanobis_sq(&center)).exp();
            for (s, l) in sums.iter_mut().zip(&g.source.logits) {
                s.add(k * l);
            }
        }
        for (v, s) in grid.voxel_mut(idx).iter_mut().zip(&sums) {
            *v = s.value();
        }
    }
    grid
}

/// Structured metrics for one evaluated frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// `null` for classes absent from both grids.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub sc_iou: f64,
    pub gaussian_count: usize,
    pub memory_ratio: f64,
    pub wall_time_ms: f64,
}

impl MetricsRecord {
    pub fn from_accumulator(
        acc: &ConfusionAccumulator,
        gaussian_count: usize,
        memory_ratio: f64,
        wall_time_ms: f64,
    ) -> Self {
        let classes: Vec<usize> = (0..acc.num_classes()).collect();
        Self {
            per_class_iou: acc.per_class_iou(),
            miou: acc.miou(&classes),
            sc_iou: acc.sc_iou(),
            gaussian_count,
            memory_ratio,
            wall_time_ms,
        }
    }
}
