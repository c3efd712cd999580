//! Seeded inputs shared by the criterion benchmarks under `benches/`.

use gaussocc_core::splatter::SparseConvKernel;
use gaussocc_core::temporal::init_gaussians;
use gaussocc_core::{GaussianSet, RigidPose, SparseFeatureGrid, VoxelGridSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `count` Gaussians on a jittered lattice over `spec` with random logits.
pub fn gaussian_set(spec: &VoxelGridSpec, count: usize, num_classes: usize, seed: u64) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gaussians = init_gaussians(spec, count, num_classes, &mut rng);
    for g in &mut gaussians {
        g.logits.iter_mut().for_each(|c| *c = rng.gen_range(-1.0..1.0));
    }
    GaussianSet::new(gaussians, num_classes, 0, RigidPose::IDENTITY).expect("logit counts match")
}

/// Sparse grid with roughly `density` of the voxels occupied.
pub fn sparse_grid(spec: &VoxelGridSpec, dim: usize, density: f64, seed: u64) -> SparseFeatureGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = SparseFeatureGrid::new(*spec, dim);
    for idx in spec.indices() {
        if rng.gen_bool(density) {
            let f = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            grid.insert(idx, f).expect("index from the grid's own spec");
        }
    }
    grid
}

pub fn conv_kernel(d_in: usize, d_out: usize, seed: u64) -> SparseConvKernel {
    SparseConvKernel::random(d_in, d_out, &mut ChaCha8Rng::seed_from_u64(seed))
}
