//! Sparse voxel features for self-encoding: Gaussians are voxelized as points
//! at their means, mixed by a submanifold 3×3×3 convolution, and read back.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use super::VoxelGridSpec;
use crate::error::{Error, Result};
use crate::gaussian::GaussianSet;
use crate::tensor::QueryMatrix;

/// Number of taps in a 3×3×3 kernel.
pub const KERNEL_TAPS: usize = 27;

/// Feature vectors on occupied voxels, keyed by linear voxel index.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFeatureGrid {
    pub spec: VoxelGridSpec,
    dim: usize,
    entries: BTreeMap<usize, Vec<f64>>,
}

impl SparseFeatureGrid {
    pub fn new(spec: VoxelGridSpec, dim: usize) -> Self {
        Self {
            spec,
            dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: [usize; 3]) -> Option<&[f64]> {
        self.entries.get(&self.spec.linear_index(idx)).map(Vec::as_slice)
    }

    pub fn insert(&mut self, idx: [usize; 3], feature: Vec<f64>) -> Result<()> {
        if (0..3).any(|a| idx[a] >= self.spec.dims[a]) {
            return Err(Error::config(format!(
                "voxel {idx:?} outside grid {:?}",
                self.spec.dims
            )));
        }
        if feature.len() != self.dim {
            return Err(Error::config(format!(
                "feature length {} does not match grid dim {}",
                feature.len(),
                self.dim
            )));
        }
        self.entries.insert(self.spec.linear_index(idx), feature);
        Ok(())
    }

    /// Entries in ascending linear-index order.
    pub fn iter(&self) -> impl Iterator<Item = ([usize; 3], &[f64])> {
        self.entries.iter().map(|(k, v)| (self.spec.unravel(*k), v.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Voxelized {
    pub grid: SparseFeatureGrid,
    /// Gaussians whose mean fell outside the grid.
    pub dropped: usize,
}

/// Places each Gaussian's feature at the voxel containing its mean.
/// Features sharing a voxel are averaged.
pub fn voxelize_means(set: &GaussianSet, features: &QueryMatrix, spec: &VoxelGridSpec) -> Result<Voxelized> {
    if features.rows() != set.len() {
        return Err(Error::config(format!(
            "{} feature rows for {} gaussians",
            features.rows(),
            set.len()
        )));
    }
    let dim = features.dim();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    let mut dropped = 0;
    for (i, m) in set.means().enumerate() {
        let Some(idx) = spec.voxel_of(m) else {
            dropped += 1;
            continue;
        };
        let (sum, n) = sums
            .entry(spec.linear_index(idx))
            .or_insert_with(|| (vec![0.0; dim], 0));
        for (s, f) in sum.iter_mut().zip(features.row(i)) {
            *s += f;
        }
        *n += 1;
    }
    let entries = sums
        .into_iter()
        .map(|(k, (mut sum, n))| {
            if n > 1 {
                let inv = n as f64;
                sum.iter_mut().for_each(|s| *s /= inv);
            }
            (k, sum)
        })
        .collect();
    Ok(Voxelized {
        grid: SparseFeatureGrid {
            spec: *spec,
            dim,
            entries,
        },
        dropped,
    })
}

/// 3×3×3 convolution weights laid out `[tap][in][out]`, where tap
/// `((dx+1)·3 + (dy+1))·3 + (dz+1)` addresses neighbor offset `(dx, dy, dz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseConvKernel {
    d_in: usize,
    d_out: usize,
    weights: Vec<f64>,
}

impl SparseConvKernel {
    pub const CENTER_TAP: usize = 13;

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_out,
            weights: vec![0.0; KERNEL_TAPS * d_in * d_out],
        }
    }

    /// Center tap = I, all other taps zero.
    pub fn identity(dim: usize) -> Self {
        let mut k = Self::zeros(dim, dim);
        for i in 0..dim {
            *k.weight_mut(Self::CENTER_TAP, i, i) = 1.0;
        }
        k
    }

    /// Uniform in `±1/√(27·d_in)`.
    pub fn random(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / ((KERNEL_TAPS * d_in) as f64).sqrt();
        let weights = (0..KERNEL_TAPS * d_in * d_out)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        Self { d_in, d_out, weights }
    }

    pub fn from_vec(d_in: usize, d_out: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != KERNEL_TAPS * d_in * d_out {
            return Err(Error::config(format!(
                "sparse kernel {d_in}->{d_out} needs {} weights, got {}",
                KERNEL_TAPS * d_in * d_out,
                weights.len()
            )));
        }
        Ok(Self { d_in, d_out, weights })
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }
    pub fn d_out(&self) -> usize {
        self.d_out
    }
    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn tap_index(offset: [i64; 3]) -> usize {
        (((offset[0] + 1) * 3 + (offset[1] + 1)) * 3 + (offset[2] + 1)) as usize
    }

    #[inline]
    pub fn weight(&self, tap: usize, i: usize, o: usize) -> f64 {
        self.weights[(tap * self.d_in + i) * self.d_out + o]
    }

    pub fn weight_mut(&mut self, tap: usize, i: usize, o: usize) -> &mut f64 {
        &mut self.weights[(tap * self.d_in + i) * self.d_out + o]
    }
}

/// Submanifold convolution: outputs exist exactly on the input's occupied
/// voxels and only occupied neighbors contribute.
pub fn sparse_conv3d(grid: &SparseFeatureGrid, kernel: &SparseConvKernel) -> Result<SparseFeatureGrid> {
    if kernel.d_in != grid.dim {
        return Err(Error::config(format!(
            "kernel expects {} input channels, grid has {}",
            kernel.d_in, grid.dim
        )));
    }
    let spec = grid.spec;
    let sites: Vec<(usize, [usize; 3])> = grid.entries.keys().map(|&k| (k, spec.unravel(k))).collect();
    let outputs: Vec<(usize, Vec<f64>)> = sites
        .par_iter()
        .map(|&(key, idx)| {
            let mut out = vec![0.0; kernel.d_out];
            for tap in 0..KERNEL_TAPS {
                let off = [(tap / 9) as i64 - 1, ((tap / 3) % 3) as i64 - 1, (tap % 3) as i64 - 1];
                let Some(nbr) = neighbor(&spec, idx, off) else { continue };
                let Some(f) = grid.entries.get(&spec.linear_index(nbr)) else {
                    continue;
                };
                for (i, fi) in f.iter().enumerate() {
                    if *fi == 0.0 {
                        continue;
                    }
                    let row = &kernel.weights[(tap * kernel.d_in + i) * kernel.d_out..][..kernel.d_out];
                    for (o, w) in out.iter_mut().zip(row) {
                        *o += fi * w;
                    }
                }
            }
            (key, out)
        })
        .collect();
    Ok(SparseFeatureGrid {
        spec,
        dim: kernel.d_out,
        entries: outputs.into_iter().collect(),
    })
}

fn neighbor(spec: &VoxelGridSpec, idx: [usize; 3], off: [i64; 3]) -> Option<[usize; 3]> {
    let mut n = [0usize; 3];
    for a in 0..3 {
        let v = idx[a] as i64 + off[a];
        if v < 0 || v >= spec.dims[a] as i64 {
            return None;
        }
        n[a] = v as usize;
    }
    Some(n)
}

/// Reads each Gaussian's voxel feature back into a query matrix. Gaussians
/// outside the grid, or on voxels missing from `grid`, keep their `prior` row.
pub fn scatter_features(grid: &SparseFeatureGrid, set: &GaussianSet, prior: &QueryMatrix) -> Result<QueryMatrix> {
    if prior.rows() != set.len() {
        return Err(Error::config(format!(
            "{} prior rows for {} gaussians",
            prior.rows(),
            set.len()
        )));
    }
    if prior.dim() != grid.dim {
        return Err(Error::config(format!(
            "prior dim {} does not match grid dim {}",
            prior.dim(),
            grid.dim
        )));
    }
    let mut out = prior.clone();
    for (i, m) in set.means().enumerate() {
        if let Some(f) = grid.spec.voxel_of(m).and_then(|idx| grid.get(idx)) {
            out.row_mut(i).copy_from_slice(f);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::SemanticGaussian;
    use crate::geometry::{RigidPose, UnitQuaternion};
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn point_set(points: &[Vector3<f64>]) -> GaussianSet {
        let gs = points
            .iter()
            .map(|m| SemanticGaussian::new(*m, Vector3::repeat(0.5), UnitQuaternion::IDENTITY, vec![0.0]).unwrap())
            .collect();
        GaussianSet::new(gs, 1, 0, RigidPose::IDENTITY).unwrap()
    }

    fn spec() -> VoxelGridSpec {
        VoxelGridSpec::new([0.0; 3], 1.0, [8, 6, 4]).unwrap()
    }

    #[test]
    fn single_gaussian_at_center() {
        let s = spec();
        let set = point_set(&[s.center([4, 3, 2])]);
        let q = QueryMatrix::from_vec(1, 2, vec![1.5, -2.0]).unwrap();
        let v = voxelize_means(&set, &q, &s).unwrap();
        assert_eq!(v.dropped, 0);
        assert_eq!(v.grid.len(), 1);
        assert_eq!(v.grid.get([4, 3, 2]), Some(&[1.5, -2.0][..]));
    }

    #[test]
    fn collisions_average_and_scatter_back() {
        let s = spec();
        let set = point_set(&[
            Vector3::new(1.2, 1.2, 1.2),
            Vector3::new(1.8, 1.1, 1.9),
            Vector3::new(50.0, 0.0, 0.0),
        ]);
        let q = QueryMatrix::from_vec(3, 2, vec![1.0, 2.0, 3.0, 6.0, 9.0, 9.0]).unwrap();
        let v = voxelize_means(&set, &q, &s).unwrap();
        assert_eq!(v.dropped, 1);
        assert_eq!(v.grid.get([1, 1, 1]), Some(&[2.0, 4.0][..]));
        let back = scatter_features(&v.grid, &set, &q).unwrap();
        assert_eq!(back.row(0), &[2.0, 4.0]);
        assert_eq!(back.row(1), &[2.0, 4.0]);
        // Out of bounds keeps its prior feature.
        assert_eq!(back.row(2), &[9.0, 9.0]);
    }

    #[test]
    fn round_trip_without_collisions_is_identity() {
        let s = spec();
        let set = point_set(&[s.center([0, 0, 0]), s.center([7, 5, 3]), s.center([2, 2, 2])]);
        let q = QueryMatrix::from_vec(3, 3, (0..9).map(f64::from).collect()).unwrap();
        let v = voxelize_means(&set, &q, &s).unwrap();
        assert_eq!(scatter_features(&v.grid, &set, &q).unwrap(), q);
    }

    #[test]
    fn row_count_mismatch_rejected() {
        let set = point_set(&[Vector3::zeros()]);
        assert!(voxelize_means(&set, &QueryMatrix::zeros(2, 1), &spec()).is_err());
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = spec();
        let mut g = SparseFeatureGrid::new(s, 3);
        for _ in 0..30 {
            let idx = [rng.gen_range(0..8), rng.gen_range(0..6), rng.gen_range(0..4)];
            g.insert(idx, (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap();
        }
        assert_eq!(sparse_conv3d(&g, &SparseConvKernel::identity(3)).unwrap(), g);
    }

    #[test]
    fn isolated_voxel_sees_only_center_tap() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = SparseConvKernel::random(2, 3, &mut rng);
        let mut g = SparseFeatureGrid::new(spec(), 2);
        g.insert([3, 3, 1], vec![0.5, -1.5]).unwrap();
        let out = sparse_conv3d(&g, &k).unwrap();
        let got = out.get([3, 3, 1]).unwrap();
        for o in 0..3 {
            let want =
                0.5 * k.weight(SparseConvKernel::CENTER_TAP, 0, o) - 1.5 * k.weight(SparseConvKernel::CENTER_TAP, 1, o);
            assert!((got[o] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn tap_layout() {
        assert_eq!(SparseConvKernel::tap_index([0, 0, 0]), SparseConvKernel::CENTER_TAP);
        assert_eq!(SparseConvKernel::tap_index([-1, -1, -1]), 0);
        assert_eq!(SparseConvKernel::tap_index([1, 1, 1]), 26);
        assert_eq!(SparseConvKernel::tap_index([1, 0, -1]), 2 * 9 + 3);
    }

    #[test]
    fn kernel_dim_mismatch_rejected() {
        let g = SparseFeatureGrid::new(spec(), 2);
        assert!(sparse_conv3d(&g, &SparseConvKernel::identity(3)).is_err());
    }
}
