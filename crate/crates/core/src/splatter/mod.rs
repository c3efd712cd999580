//! Gaussian-to-voxel splatting.
//!
//! Voxel `(x, y, z)` has its center at `origin + (i + ½)·voxel_size` and the
//! linear index `(x·Y + y)·Z + z`. Semantic grids store `C` channels per
//! voxel contiguously.

mod sparse;

pub use sparse::{
    scatter_features, sparse_conv3d, voxelize_means, SparseConvKernel, SparseFeatureGrid, Voxelized, KERNEL_TAPS,
};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{classify, GaussianSet, Label, PreparedGaussian, SemanticGaussian};

/// Slack, in voxel units, added to extent bounds so rounding never drops a voxel.
const EXTENT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VoxelGridSpecRaw")]
pub struct VoxelGridSpec {
    pub origin: [f64; 3],
    pub voxel_size: f64,
    pub dims: [usize; 3],
}

#[derive(Deserialize)]
struct VoxelGridSpecRaw {
    origin: [f64; 3],
    voxel_size: f64,
    dims: [usize; 3],
}

impl TryFrom<VoxelGridSpecRaw> for VoxelGridSpec {
    type Error = Error;
    fn try_from(r: VoxelGridSpecRaw) -> Result<Self> {
        Self::new(r.origin, r.voxel_size, r.dims)
    }
}

impl VoxelGridSpec {
    pub fn new(origin: [f64; 3], voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::config(format!("voxel size must be positive, got {voxel_size}")));
        }
        if dims.contains(&0) {
            return Err(Error::config(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::config("grid origin must be finite"));
        }
        Ok(Self {
            origin,
            voxel_size,
            dims,
        })
    }

    /// Grid of `dims` voxels centered on the origin of its frame.
    pub fn centered(voxel_size: f64, dims: [usize; 3]) -> Result<Self> {
        let origin = dims.map(|d| -0.5 * d as f64 * voxel_size);
        Self::new(origin, voxel_size, dims)
    }

    pub fn num_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    pub fn linear_index(&self, [x, y, z]: [usize; 3]) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn unravel(&self, lin: usize) -> [usize; 3] {
        let z = lin % self.dims[2];
        let rest = lin / self.dims[2];
        [rest / self.dims[1], rest % self.dims[1], z]
    }

    #[inline]
    pub fn center(&self, idx: [usize; 3]) -> Vector3<f64> {
        Vector3::new(
            self.origin[0] + (idx[0] as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (idx[1] as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (idx[2] as f64 + 0.5) * self.voxel_size,
        )
    }

    /// The voxel containing `p`, if any. Cells are half-open `[lo, hi)`.
    pub fn voxel_of(&self, p: &Vector3<f64>) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    pub fn upper_corner(&self) -> Vector3<f64> {
        Vector3::from_fn(|a, _| self.origin[a] + self.dims[a] as f64 * self.voxel_size)
    }

    pub fn indices(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (0..self.num_voxels()).map(|i| self.unravel(i))
    }
}

/// Dense grid of `C`-channel semantic vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVoxelGrid {
    pub spec: VoxelGridSpec,
    num_classes: usize,
    values: Vec<f64>,
}

impl SemanticVoxelGrid {
    pub fn zeros(spec: VoxelGridSpec, num_classes: usize) -> Self {
        Self {
            spec,
            num_classes,
            values: vec![0.0; spec.num_voxels() * num_classes],
        }
    }

    pub fn from_values(spec: VoxelGridSpec, num_classes: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.num_voxels() * num_classes {
            return Err(Error::Format(format!(
                "expected {} values for {:?}x{num_classes}, got {}",
                spec.num_voxels() * num_classes,
                spec.dims,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("grid values must be finite".into()));
        }
        Ok(Self {
            spec,
            num_classes,
            values,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn voxel(&self, idx: [usize; 3]) -> &[f64] {
        let at = self.spec.linear_index(idx) * self.num_classes;
        &self.values[at..at + self.num_classes]
    }

    pub fn voxel_mut(&mut self, idx: [usize; 3]) -> &mut [f64] {
        let at = self.spec.linear_index(idx) * self.num_classes;
        &mut self.values[at..at + self.num_classes]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `‖self − other‖_F / ‖other‖_F`.
    pub fn relative_frobenius(&self, other: &Self) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (a, b) in self.values.iter().zip(&other.values) {
            num += (a - b) * (a - b);
            den += b * b;
        }
        if den == 0.0 {
            if num == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (num / den).sqrt()
        }
    }

    pub fn classify(&self, threshold: f64) -> LabelGrid {
        let labels = self
            .values
            .chunks_exact(self.num_classes.max(1))
            .map(|o| {
                if self.num_classes == 0 {
                    Label::Empty
                } else {
                    classify(o, threshold)
                }
            })
            .collect();
        LabelGrid {
            spec: self.spec,
            labels,
        }
    }

    /// Bytes a dense grid of this shape takes as 32-bit floats.
    pub fn dense_bytes(spec: &VoxelGridSpec, num_classes: usize) -> usize {
        spec.num_voxels() * num_classes * std::mem::size_of::<f32>()
    }
}

impl std::ops::Add for &SemanticVoxelGrid {
    type Output = SemanticVoxelGrid;
    fn add(self, rhs: Self) -> SemanticVoxelGrid {
        assert_eq!(self.values.len(), rhs.values.len(), "grid shapes differ");
        SemanticVoxelGrid {
            spec: self.spec,
            num_classes: self.num_classes,
            values: self.values.iter().zip(&rhs.values).map(|(a, b)| a + b).collect(),
        }
    }
}

/// Dense grid of discrete labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub spec: VoxelGridSpec,
    pub labels: Vec<Label>,
}

impl LabelGrid {
    pub fn filled(spec: VoxelGridSpec, label: Label) -> Self {
        Self {
            spec,
            labels: vec![label; spec.num_voxels()],
        }
    }

    pub fn get(&self, idx: [usize; 3]) -> Label {
        self.labels[self.spec.linear_index(idx)]
    }

    pub fn set(&mut self, idx: [usize; 3], label: Label) {
        let i = self.spec.linear_index(idx);
        self.labels[i] = label;
    }

    pub fn count(&self, label: Label) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

/// Inclusive voxel index box; empty when any `min > max`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoxelBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
    pub empty: bool,
}

impl VoxelBox {
    pub const EMPTY: Self = Self {
        min: [0; 3],
        max: [0; 3],
        empty: true,
    };

    pub fn len(&self) -> usize {
        if self.empty {
            0
        } else {
            (0..3).map(|a| self.max[a] - self.min[a] + 1).product()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.empty
    }

    pub fn contains(&self, idx: [usize; 3]) -> bool {
        !self.empty && (0..3).all(|a| idx[a] >= self.min[a] && idx[a] <= self.max[a])
    }
}

/// Voxel box around every center within Mahalanobis distance `k_sigma` of the mean.
///
/// Uses per-axis half-widths `k_sigma·√Σ_aa`, which bound the `k_sigma`
/// ellipsoid. `k_sigma = ∞` covers the whole grid.
pub fn gaussian_extent(g: &SemanticGaussian, k_sigma: f64, spec: &VoxelGridSpec) -> VoxelBox {
    extent_from_covariance(&g.mean, &g.covariance(), k_sigma, spec)
}

fn extent_from_covariance(
    mean: &Vector3<f64>,
    covariance: &nalgebra::Matrix3<f64>,
    k_sigma: f64,
    spec: &VoxelGridSpec,
) -> VoxelBox {
    if k_sigma.is_infinite() {
        return VoxelBox {
            min: [0; 3],
            max: spec.dims.map(|d| d - 1),
            empty: false,
        };
    }
    let mut min = [0usize; 3];
    let mut max = [0usize; 3];
    for a in 0..3 {
        let half = k_sigma * covariance[(a, a)].sqrt();
        // Center i sits at origin + (i + ½)·vs; solve for the index range.
        let lo = (mean[a] - half - spec.origin[a]) / spec.voxel_size - 0.5 - EXTENT_SLACK;
        let hi = (mean[a] + half - spec.origin[a]) / spec.voxel_size - 0.5 + EXTENT_SLACK;
        let lo = lo.ceil().max(0.0);
        let hi = hi.floor().min(spec.dims[a] as f64 - 1.0);
        if !(lo <= hi) {
            return VoxelBox::EMPTY;
        }
        min[a] = lo as usize;
        max[a] = hi as usize;
    }
    VoxelBox { min, max, empty: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplatOptions {
    pub k_sigma: f64,
    pub workers: usize,
    /// Accumulate every Gaussian into one buffer in list order.
    pub deterministic: bool,
}

impl Default for SplatOptions {
    fn default() -> Self {
        Self {
            k_sigma: 3.0,
            workers: 1,
            deterministic: true,
        }
    }
}

impl SplatOptions {
    pub fn exact() -> Self {
        Self {
            k_sigma: f64::INFINITY,
            ..Self::default()
        }
    }

    pub fn with_k_sigma(k_sigma: f64) -> Self {
        Self {
            k_sigma,
            ..Self::default()
        }
    }
}

/// Adds one Gaussian to the voxels of `bx` whose x index lies in `xs`.
/// `values` begins at the first voxel of x index `x0`.
fn accumulate(
    values: &mut [f64],
    x0: usize,
    xs: std::ops::RangeInclusive<usize>,
    prepared: &PreparedGaussian<'_>,
    bx: &VoxelBox,
    spec: &VoxelGridSpec,
    c: usize,
) {
    let base = spec.linear_index([x0, 0, 0]) * c;
    for x in xs {
        for y in bx.min[1]..=bx.max[1] {
            for z in bx.min[2]..=bx.max[2] {
                let idx = [x, y, z];
                let k = prepared.kernel(&spec.center(idx));
                if k == 0.0 {
                    continue;
                }
                let at = spec.linear_index(idx) * c - base;
                for (v, l) in values[at..at + c].iter_mut().zip(&prepared.source.logits) {
                    *v += k * l;
                }
            }
        }
    }
}

/// Accumulates every Gaussian onto the voxel centers inside its extent.
///
/// Each voxel receives its contributions in list order, so the result
/// reproduces [`crate::gaussian::eval_mixture`] at each center bit for bit
/// when `k_sigma = ∞`. Deterministic mode makes one pass over the set; with
/// more than one worker the grid is instead cut into x slabs that are filled
/// concurrently, which yields the same values.
pub fn splat(set: &GaussianSet, spec: &VoxelGridSpec, opts: &SplatOptions) -> SemanticVoxelGrid {
    let c = set.num_classes();
    let mut grid = SemanticVoxelGrid::zeros(*spec, c);
    if set.is_empty() || c == 0 {
        return grid;
    }
    let k_sigma = opts.k_sigma;
    let workers = opts.workers.max(1);
    if opts.deterministic || workers == 1 {
        for g in &set.gaussians {
            let prepared = PreparedGaussian::new(g);
            let bx = extent_from_covariance(&g.mean, &prepared.covariance, k_sigma, spec);
            if !bx.is_empty() {
                accumulate(&mut grid.values, 0, bx.min[0]..=bx.max[0], &prepared, &bx, spec, c);
            }
        }
        return grid;
    }
    let prepared: Vec<(PreparedGaussian<'_>, VoxelBox)> = set
        .gaussians
        .par_iter()
        .map(|g| {
            let p = PreparedGaussian::new(g);
            let bx = extent_from_covariance(&g.mean, &p.covariance, k_sigma, spec);
            (p, bx)
        })
        .filter(|(_, bx)| !bx.is_empty())
        .collect();
    let plane = spec.dims[1] * spec.dims[2] * c;
    let slab = spec.dims[0].div_ceil(4 * workers).max(1);
    grid.values
        .par_chunks_mut(slab * plane)
        .enumerate()
        .for_each(|(s, chunk)| {
            let x0 = s * slab;
            let x1 = x0 + chunk.len() / plane - 1;
            for (p, bx) in &prepared {
                let (lo, hi) = (bx.min[0].max(x0), bx.max[0].min(x1));
                if lo <= hi {
                    accumulate(chunk, x0, lo..=hi, p, bx, spec, c);
                }
            }
        });
    grid
}

/// Worst-case localized-splat deviation: `P·exp(−k²/2)·max‖c‖∞`.
pub fn truncation_bound(set: &GaussianSet, k_sigma: f64) -> f64 {
    let max_c = set
        .iter()
        .flat_map(|g| g.logits.iter())
        .fold(0.0_f64, |m, c| m.max(c.abs()));
    set.len() as f64 * (-0.5 * k_sigma * k_sigma).exp() * max_c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::eval_mixture;
    use crate::geometry::{RigidPose, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec_32() -> VoxelGridSpec {
        VoxelGridSpec::new([0.0; 3], 1.0, [32, 32, 8]).unwrap()
    }

    fn random_set(rng: &mut impl Rng, spec: &VoxelGridSpec, p: usize, c: usize) -> GaussianSet {
        let hi = spec.upper_corner();
        let gs = (0..p)
            .map(|_| {
                let mean = Vector3::from_fn(|a, _| rng.gen_range(spec.origin[a]..hi[a]));
                let scale = Vector3::from_fn(|_, _| rng.gen_range(0.4..2.0));
                let q = UnitQuaternion::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
                .unwrap();
                let logits = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
                SemanticGaussian::new(mean, scale, q, logits).unwrap()
            })
            .collect();
        GaussianSet::new(gs, c, 0, RigidPose::IDENTITY).unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(VoxelGridSpec::new([0.0; 3], 0.0, [1, 1, 1]).is_err());
        assert!(VoxelGridSpec::new([0.0; 3], 1.0, [1, 0, 1]).is_err());
        let s = VoxelGridSpec::centered(0.5, [4, 4, 2]).unwrap();
        assert_eq!(s.origin, [-1.0, -1.0, -0.5]);
        assert_eq!(s.voxel_of(&Vector3::new(-1.0, 0.99, 0.49)), Some([0, 3, 1]));
        assert_eq!(s.voxel_of(&Vector3::new(1.0, 0.0, 0.0)), None);
    }

    #[test]
    fn linear_index_round_trip() {
        let s = spec_32();
        for lin in [0, 1, 7, 8, 255, 256, s.num_voxels() - 1] {
            assert_eq!(s.linear_index(s.unravel(lin)), lin);
        }
        assert_eq!(s.linear_index([1, 0, 0]), 32 * 8);
    }

    #[test]
    fn isotropic_extent_half_width_three() {
        let spec = VoxelGridSpec::new([0.0; 3], 1.0, [21, 21, 21]).unwrap();
        let g = SemanticGaussian::new(
            spec.center([10, 10, 10]),
            Vector3::repeat(1.0),
            UnitQuaternion::IDENTITY,
            vec![1.0],
        )
        .unwrap();
        let bx = gaussian_extent(&g, 3.0, &spec);
        assert_eq!(bx.min, [7, 7, 7]);
        assert_eq!(bx.max, [13, 13, 13]);
    }

    #[test]
    fn far_gaussian_has_empty_extent() {
        let spec = spec_32();
        let g = SemanticGaussian::new(
            Vector3::new(-100.0, 5.0, 5.0),
            Vector3::repeat(1.0),
            UnitQuaternion::IDENTITY,
            vec![1.0],
        )
        .unwrap();
        assert!(gaussian_extent(&g, 3.0, &spec).is_empty());
        assert!(!gaussian_extent(&g, f64::INFINITY, &spec).is_empty());
    }

    #[test]
    fn extent_contains_every_qualifying_voxel() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = VoxelGridSpec::new([-4.0; 3], 0.5, [16, 16, 16]).unwrap();
        for _ in 0..50 {
            let set = random_set(&mut rng, &spec, 1, 1);
            let g = &set.gaussians[0];
            let k = rng.gen_range(1.0..4.0);
            let bx = gaussian_extent(g, k, &spec);
            let prepared = g.prepare();
            for idx in spec.indices() {
                if prepared.mahalanobis_sq(&spec.center(idx)) <= k * k {
                    assert!(bx.contains(idx), "voxel {idx:?} missing from {bx:?}");
                }
            }
        }
    }

    #[test]
    fn empty_set_splats_to_zero() {
        let grid = splat(&GaussianSet::empty(4), &spec_32(), &SplatOptions::default());
        assert!(grid.values().iter().all(|v| *v == 0.0));
        assert_eq!(grid.values().len(), 32 * 32 * 8 * 4);
    }

    #[test]
    fn exact_splat_matches_mixture_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = VoxelGridSpec::new([0.0; 3], 1.0, [12, 10, 6]).unwrap();
        for p in [1, 5] {
            let set = random_set(&mut rng, &spec, p, 3);
            let grid = splat(&set, &spec, &SplatOptions::exact());
            for idx in spec.indices() {
                assert_eq!(grid.voxel(idx), eval_mixture(&set, &spec.center(idx)).as_slice());
            }
        }
    }

    #[test]
    fn localized_splat_within_truncation_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = spec_32();
        for _ in 0..100 {
            let set = random_set(&mut rng, &spec, 20, 2);
            let exact = splat(&set, &spec, &SplatOptions::exact());
            for k in [2.0, 3.0] {
                let local = splat(&set, &spec, &SplatOptions::with_k_sigma(k));
                assert!(local.max_abs_diff(&exact) <= truncation_bound(&set, k));
            }
        }
    }

    #[test]
    fn parallel_splat_matches_sequential_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = spec_32();
        let set = random_set(&mut rng, &spec, 40, 3);
        let seq = splat(&set, &spec, &SplatOptions::default());
        let opts = SplatOptions {
            workers: 4,
            deterministic: false,
            ..SplatOptions::default()
        };
        let par = splat(&set, &spec, &opts);
        assert_eq!(par, seq);
        for (workers, k_sigma) in [(2, 3.0), (3, f64::INFINITY), (64, 2.0)] {
            let opts = SplatOptions {
                k_sigma,
                workers,
                deterministic: false,
            };
            assert_eq!(
                splat(&set, &spec, &opts),
                splat(&set, &spec, &SplatOptions::with_k_sigma(k_sigma))
            );
        }
    }

    #[test]
    fn splat_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = spec_32();
        let a = random_set(&mut rng, &spec, 10, 2);
        let b = random_set(&mut rng, &spec, 7, 2);
        let mut both = a.gaussians.clone();
        both.extend(b.gaussians.iter().cloned());
        let union = GaussianSet::new(both, 2, 0, RigidPose::IDENTITY).unwrap();
        let opts = SplatOptions::default();
        let sum = &splat(&a, &spec, &opts) + &splat(&b, &spec, &opts);
        assert!(splat(&union, &spec, &opts).max_abs_diff(&sum) < 1e-9);
    }

    #[test]
    fn classify_grid_thresholds() {
        let spec = VoxelGridSpec::new([0.0; 3], 1.0, [2, 1, 1]).unwrap();
        let grid = SemanticVoxelGrid::from_values(spec, 2, vec![0.2, 0.9, 0.01, 0.0]).unwrap();
        let labels = grid.classify(0.05);
        assert_eq!(labels.labels, vec![Label::Class(1), Label::Empty]);
    }
}
