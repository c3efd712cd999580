//! Deformable attention over unstructured 3D feature sets, and temporal
//! self-attention between current and ego-aligned previous Gaussians.

use std::collections::HashMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{AttentionWeights, SamplingPlan};
use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::splatter::VoxelGridSpec;
use crate::tensor::QueryMatrix;

/// How a feature is read from scattered positions at an arbitrary point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ValueSampling {
    /// Inverse-distance weights over the `k` nearest positions; distances are
    /// clamped below at `floor`.
    Knn { k: usize, floor: f64 },
    /// Features averaged per voxel, then trilinearly blended over the occupied
    /// corners surrounding the point.
    Trilinear { spec: VoxelGridSpec },
}

impl ValueSampling {
    pub const DEFAULT_FLOOR: f64 = 1e-6;
}

impl Default for ValueSampling {
    fn default() -> Self {
        ValueSampling::Knn {
            k: 4,
            floor: Self::DEFAULT_FLOOR,
        }
    }
}

/// One contribution to a sampled feature: a row weight and its spatial gradient.
#[derive(Debug, Clone, Copy)]
struct Tap3 {
    row: usize,
    w: f64,
    dw: Vector3<f64>,
}

/// Uniform hash grid for exact k-nearest-neighbor queries.
#[derive(Debug, Clone)]
struct KnnGrid {
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl KnnGrid {
    fn new(positions: &[Vector3<f64>]) -> Self {
        let mut min = Vector3::repeat(f64::INFINITY);
        let mut max = Vector3::repeat(f64::NEG_INFINITY);
        for p in positions {
            min = min.inf(p);
            max = max.sup(p);
        }
        let extent = max - min;
        let volume: f64 = extent.iter().map(|e| e.max(1e-3)).product();
        let cell = (2.0 * volume / positions.len().max(1) as f64).cbrt().max(1e-6);
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let (mut lo, mut hi) = ([i64::MAX; 3], [i64::MIN; 3]);
        for (i, p) in positions.iter().enumerate() {
            let key = Self::key(cell, p);
            for a in 0..3 {
                lo[a] = lo[a].min(key[a]);
                hi[a] = hi[a].max(key[a]);
            }
            cells.entry(key).or_default().push(i);
        }
        Self { cell, cells, lo, hi }
    }

    fn key(cell: f64, p: &Vector3<f64>) -> [i64; 3] {
        [0, 1, 2].map(|a| (p[a] / cell).floor().clamp(-1e15, 1e15) as i64)
    }

    /// Indices and distances of the `k` nearest positions, ordered by
    /// distance then index.
    fn nearest(&self, positions: &[Vector3<f64>], p: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let k = k.min(positions.len());
        let center = Self::key(self.cell, p);
        let max_ring = (0..3)
            .map(|a| (center[a] - self.lo[a]).abs().max((self.hi[a] - center[a]).abs()))
            .max()
            .unwrap_or(0);
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let consider = |i: usize, best: &mut Vec<(f64, usize)>| {
            let d2 = (positions[i] - p).norm_squared();
            if best.len() == k && (d2, i) >= *best.last().unwrap() {
                return;
            }
            let at = best.partition_point(|&(bd, bi)| (bd, bi) < (d2, i));
            best.insert(at, (d2, i));
            best.truncate(k);
        };
        let span = (2 * max_ring + 1) as f64;
        if span * span * span > 4.0 * positions.len() as f64 {
            for i in 0..positions.len() {
                consider(i, &mut best);
            }
            return best.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect();
        }
        for r in 0..=max_ring {
            for dx in -r..=r {
                for dy in -r..=r {
                    let edge = dx.abs() == r || dy.abs() == r;
                    let step = if edge { 1 } else { 2 * r as usize };
                    for dz in (-r..=r).step_by(step) {
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if let Some(list) = self.cells.get(&key) {
                            for &i in list {
                                consider(i, &mut best);
                            }
                        }
                    }
                }
            }
            if best.len() == k {
                let reach = r as f64 * self.cell;
                if best[k - 1].0 <= reach * reach {
                    break;
                }
            }
        }
        best.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }
}

#[derive(Debug, Clone)]
enum FieldIndex {
    Knn {
        k: usize,
        floor: f64,
        grid: KnnGrid,
    },
    Voxels {
        spec: VoxelGridSpec,
        cells: HashMap<usize, Vec<usize>>,
    },
}

/// Features attached to scattered 3D positions, indexed for sampling.
#[derive(Debug, Clone)]
pub struct ValueField {
    positions: Vec<Vector3<f64>>,
    features: QueryMatrix,
    index: FieldIndex,
}

impl ValueField {
    pub fn new(positions: Vec<Vector3<f64>>, features: QueryMatrix, sampling: &ValueSampling) -> Result<Self> {
        if positions.len() != features.rows() {
            return Err(Error::config(format!(
                "{} positions for {} feature rows",
                positions.len(),
                features.rows()
            )));
        }
        if positions.is_empty() {
            return Err(Error::config("a value field needs at least one position"));
        }
        let index = match *sampling {
            ValueSampling::Knn { k, floor } => {
                if k == 0 || !(floor > 0.0) {
                    return Err(Error::config("kNN sampling needs k >= 1 and a positive distance floor"));
                }
                FieldIndex::Knn {
                    k,
                    floor,
                    grid: KnnGrid::new(&positions),
                }
            }
            ValueSampling::Trilinear { spec } => {
                let mut cells: HashMap<usize, Vec<usize>> = HashMap::new();
                for (i, p) in positions.iter().enumerate() {
                    if let Some(idx) = spec.voxel_of(p) {
                        cells.entry(spec.linear_index(idx)).or_default().push(i);
                    }
                }
                FieldIndex::Voxels { spec, cells }
            }
        };
        Ok(Self {
            positions,
            features,
            index,
        })
    }

    /// Gaussian means paired with per-Gaussian features.
    pub fn from_set(set: &GaussianSet, features: &QueryMatrix, sampling: &ValueSampling) -> Result<Self> {
        Self::new(set.means().copied().collect(), features.clone(), sampling)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.dim()
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn features(&self) -> &QueryMatrix {
        &self.features
    }

    /// Normalized row weights at `p` with their gradients in `p`.
    fn taps(&self, p: &Vector3<f64>) -> Vec<Tap3> {
        let mut raw = Vec::new();
        match &self.index {
            FieldIndex::Knn { k, floor, grid } => {
                for (row, d) in grid.nearest(&self.positions, p, *k) {
                    if d > *floor {
                        let w = 1.0 / d;
                        raw.push(Tap3 {
                            row,
                            w,
                            dw: -(p - self.positions[row]) / (d * d * d),
                        });
                    } else {
                        raw.push(Tap3 {
                            row,
                            w: 1.0 / floor,
                            dw: Vector3::zeros(),
                        });
                    }
                }
            }
            FieldIndex::Voxels { spec, cells } => {
                let c: [f64; 3] = [0, 1, 2].map(|a| (p[a] - spec.origin[a]) / spec.voxel_size - 0.5);
                if c.iter().all(|v| v.is_finite()) {
                    let base = c.map(f64::floor);
                    let frac = [0, 1, 2].map(|a| c[a] - base[a]);
                    for corner in 0..8 {
                        let bits = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
                        let mut idx = [0usize; 3];
                        let mut inside = true;
                        for a in 0..3 {
                            let i = base[a] + bits[a] as f64;
                            if i < 0.0 || i >= spec.dims[a] as f64 {
                                inside = false;
                                break;
                            }
                            idx[a] = i as usize;
                        }
                        if !inside {
                            continue;
                        }
                        let Some(members) = cells.get(&spec.linear_index(idx)) else {
                            continue;
                        };
                        let f = [0, 1, 2].map(|a| if bits[a] == 1 { frac[a] } else { 1.0 - frac[a] });
                        let s = [0, 1, 2].map(|a| if bits[a] == 1 { 1.0 } else { -1.0 } / spec.voxel_size);
                        let w = f[0] * f[1] * f[2];
                        let dw = Vector3::new(s[0] * f[1] * f[2], f[0] * s[1] * f[2], f[0] * f[1] * s[2]);
                        let share = 1.0 / members.len() as f64;
                        for &row in members {
                            raw.push(Tap3 {
                                row,
                                w: w * share,
                                dw: dw * share,
                            });
                        }
                    }
                }
            }
        }
        let total: f64 = raw.iter().map(|t| t.w).sum();
        if !(total > 0.0) {
            return Vec::new();
        }
        let d_total: Vector3<f64> = raw.iter().map(|t| t.dw).sum();
        raw.iter()
            .map(|t| {
                let w = t.w / total;
                Tap3 {
                    row: t.row,
                    w,
                    dw: (t.dw - d_total * w) / total,
                }
            })
            .collect()
    }

    /// Distance `p` can move before the sampling weights stop being smooth:
    /// a change of neighbor set or distance clamp for kNN, a lattice plane for
    /// trilinear sampling.
    pub fn kink_margin(&self, p: &Vector3<f64>) -> f64 {
        match &self.index {
            FieldIndex::Knn { k, floor, grid } => {
                let near = grid.nearest(&self.positions, p, k + 1);
                let mut margin = f64::INFINITY;
                if near.len() > *k {
                    margin = near[*k].1 - near[*k - 1].1;
                }
                for (_, d) in near.iter().take(*k) {
                    margin = margin.min((d - floor).abs());
                }
                margin / 2.0
            }
            FieldIndex::Voxels { spec, .. } => (0..3)
                .map(|a| {
                    let c = (p[a] - spec.origin[a]) / spec.voxel_size - 0.5;
                    (c - c.round()).abs() * spec.voxel_size
                })
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// The field's feature at `p`; zero where no position contributes.
    pub fn sample(&self, p: &Vector3<f64>) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for t in self.taps(p) {
            for (o, f) in out.iter_mut().zip(self.features.row(t.row)) {
                *o += t.w * f;
            }
        }
        out
    }
}

fn sample_point(plan: &SamplingPlan, p: &Vector3<f64>, s: usize) -> Vector3<f64> {
    let off = plan.offset(s);
    p + Vector3::new(off[0], off[1], off[2])
}

fn accumulate_3d(plan: &SamplingPlan, p: &Vector3<f64>, field: &ValueField, out: &mut [f64]) {
    for s in 0..plan.num_samples() {
        let a = plan.weights[s];
        for t in field.taps(&sample_point(plan, p, s)) {
            let w = a * t.w;
            for (o, f) in out.iter_mut().zip(field.features.row(t.row)) {
                *o += w * f;
            }
        }
    }
}

fn backward_3d(
    plan: &SamplingPlan,
    p: &Vector3<f64>,
    field: &ValueField,
    grad: &[f64],
    d_offsets: &mut [f64],
    d_weights: &mut [f64],
    mut d_features: Option<&mut QueryMatrix>,
) {
    for s in 0..plan.num_samples() {
        let a = plan.weights[s];
        let mut g_sample = 0.0;
        let mut g_point = Vector3::zeros();
        for t in field.taps(&sample_point(plan, p, s)) {
            let gf: f64 = field.features.row(t.row).iter().zip(grad).map(|(f, g)| f * g).sum();
            g_sample += t.w * gf;
            g_point += t.dw * gf;
            if let Some(df) = d_features.as_deref_mut() {
                for (d, g) in df.row_mut(t.row).iter_mut().zip(grad) {
                    *d += a * t.w * g;
                }
            }
        }
        d_weights[s] += g_sample;
        for a_ in 0..3 {
            d_offsets[3 * s + a_] += a * g_point[a_];
        }
    }
}

fn check_3d(weights: &AttentionWeights) -> Result<()> {
    if weights.offset_dims() != 3 {
        return Err(Error::config("3D deformable attention needs 3D offsets"));
    }
    Ok(())
}

/// Deformable attention at `p`: offsets and weights predicted from `cond`,
/// each sample point gathering from `field`.
pub fn deformable_attn_3d(
    cond: &[f64],
    p: &Vector3<f64>,
    field: &ValueField,
    weights: &AttentionWeights,
) -> Result<Vec<f64>> {
    check_3d(weights)?;
    let plan = weights.plan(cond);
    let mut out = vec![0.0; field.dim()];
    accumulate_3d(&plan, p, field, &mut out);
    Ok(out)
}

/// Value and gradients of `gradᵀ·deformable_attn_3d(..)`.
#[derive(Debug, Clone)]
pub struct Da3dGradient {
    pub value: Vec<f64>,
    pub d_cond: Vec<f64>,
    pub d_features: QueryMatrix,
}

pub fn deformable_attn_3d_vjp(
    cond: &[f64],
    p: &Vector3<f64>,
    field: &ValueField,
    weights: &AttentionWeights,
    grad: &[f64],
) -> Result<Da3dGradient> {
    check_3d(weights)?;
    let plan = weights.plan(cond);
    let mut value = vec![0.0; field.dim()];
    accumulate_3d(&plan, p, field, &mut value);
    let mut d_offsets = vec![0.0; plan.offsets.len()];
    let mut d_weights = vec![0.0; plan.num_samples()];
    let mut d_features = QueryMatrix::zeros(field.len(), field.dim());
    backward_3d(
        &plan,
        p,
        field,
        grad,
        &mut d_offsets,
        &mut d_weights,
        Some(&mut d_features),
    );
    Ok(Da3dGradient {
        value,
        d_cond: weights.backward(&plan, &d_offsets, &d_weights),
        d_features,
    })
}

/// Temporal self-attention. Row `i` at mean `pᵢ` is conditioned on
/// `[Qᵢ ‖ Hᵢ]` and gathers from both the current field and the history field.
/// Without history, the current queries stand in for both.
pub fn temporal_self_attention(
    queries: &QueryMatrix,
    current: &GaussianSet,
    history: Option<(&GaussianSet, &QueryMatrix)>,
    weights: &AttentionWeights,
    sampling: &ValueSampling,
) -> Result<QueryMatrix> {
    check_3d(weights)?;
    if queries.rows() != current.len() {
        return Err(Error::config(format!(
            "{} query rows for {} current gaussians",
            queries.rows(),
            current.len()
        )));
    }
    if weights.cond_dim() != 2 * queries.dim() {
        return Err(Error::config(format!(
            "temporal attention takes {} inputs, expected twice the query dim {}",
            weights.cond_dim(),
            queries.dim()
        )));
    }
    let (hist_set, hist_queries) = match history {
        Some((set, q)) => {
            if set.len() != q.rows() || q.rows() != queries.rows() || q.dim() != queries.dim() {
                return Err(Error::config(format!(
                    "history has {} gaussians and {}x{} queries, current queries are {}x{}",
                    set.len(),
                    q.rows(),
                    q.dim(),
                    queries.rows(),
                    queries.dim()
                )));
            }
            (set, q)
        }
        None => (current, queries),
    };
    let current_field = ValueField::from_set(current, queries, sampling)?;
    let history_field = ValueField::from_set(hist_set, hist_queries, sampling)?;
    let dim = queries.dim();
    let rows: Vec<Vec<f64>> = current
        .gaussians
        .par_iter()
        .enumerate()
        .map(|(i, g)| {
            let mut cond = Vec::with_capacity(2 * dim);
            cond.extend_from_slice(queries.row(i));
            cond.extend_from_slice(hist_queries.row(i));
            let plan = weights.plan(&cond);
            let mut a = vec![0.0; dim];
            accumulate_3d(&plan, &g.mean, &current_field, &mut a);
            let mut b = vec![0.0; dim];
            accumulate_3d(&plan, &g.mean, &history_field, &mut b);
            a.iter().zip(&b).map(|(x, y)| x + y).collect()
        })
        .collect();
    QueryMatrix::from_rows(dim, &rows)
}
