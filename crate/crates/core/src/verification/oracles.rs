//! Seeded comparisons of the optimized kernels against brute-force references
//! and hand-written transcripts.

use std::time::Instant;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dense_reference_splat;
use crate::attention::{deformable_attn_2d, deformable_attn_3d, AttentionWeights, ValueField, ValueSampling};
use crate::error::Result;
use crate::gaussian::{GaussianSet, SemanticGaussian};
use crate::geometry::{RigidPose, UnitQuaternion};
use crate::nn::{Activation, Mlp};
use crate::splatter::{
    sparse_conv3d, splat, truncation_bound, SparseConvKernel, SparseFeatureGrid, SplatOptions, VoxelGridSpec,
};
use crate::tensor::{FeatureMap, QueryMatrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub cases: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
}

impl OracleReport {
    pub fn passes(&self) -> bool {
        self.max_abs_error <= self.tolerance
    }
}

/// Localized and exact splatting against the dense reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplatOracleReport {
    pub scenes: usize,
    pub k_sigma: f64,
    /// Worst `|splat(k = ∞) − dense|`.
    pub max_exact_error: f64,
    /// Worst `|splat(k_sigma) − dense|`.
    pub max_truncated_error: f64,
    /// Worst relative Frobenius error of the truncated splat.
    pub max_truncated_frobenius: f64,
    /// Scenes whose truncated error exceeded `P·exp(−k²/2)·max|c|`.
    pub bound_violations: usize,
    pub elapsed_ms: f64,
}

/// A seeded scene of up to `max_gaussians` Gaussians with means inside
/// `spec`, scales of half a voxel to two voxels, random orientation and
/// logits uniform in `±1`.
pub fn random_scene(spec: &VoxelGridSpec, max_gaussians: usize, num_classes: usize, rng: &mut impl Rng) -> GaussianSet {
    let n = rng.gen_range(1..=max_gaussians.max(1));
    let upper = spec.upper_corner();
    let gaussians = (0..n)
        .map(|_| {
            let mean = Vector3::from_fn(|a, _| rng.gen_range(spec.origin[a]..upper[a]));
            let scale = Vector3::from_fn(|_, _| rng.gen_range(0.5..2.0) * spec.voxel_size);
            let rotation = loop {
                let q: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                if q.iter().map(|x| x * x).sum::<f64>() > 0.05 {
                    break UnitQuaternion::from_array(q).expect("norm checked");
                }
            };
            let logits = (0..num_classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
            SemanticGaussian::new(mean, scale, rotation, logits).expect("valid by construction")
        })
        .collect();
    GaussianSet::new(gaussians, num_classes, 0, RigidPose::IDENTITY).expect("class counts agree")
}

pub fn splat_oracle_suite(
    scenes: usize,
    max_gaussians: usize,
    spec: &VoxelGridSpec,
    k_sigma: f64,
    seed: u64,
) -> SplatOracleReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SplatOracleReport {
        scenes,
        k_sigma,
        max_exact_error: 0.0,
        max_truncated_error: 0.0,
        max_truncated_frobenius: 0.0,
        bound_violations: 0,
        elapsed_ms: 0.0,
    };
    for _ in 0..scenes {
        let set = random_scene(spec, max_gaussians, 4, &mut rng);
        let dense = dense_reference_splat(&set, spec);
        let exact = splat(&set, spec, &SplatOptions::exact());
        let local = splat(&set, spec, &SplatOptions::with_k_sigma(k_sigma));
        let err = local.max_abs_diff(&dense);
        report.max_exact_error = report.max_exact_error.max(exact.max_abs_diff(&dense));
        report.max_truncated_error = report.max_truncated_error.max(err);
        report.max_truncated_frobenius = report.max_truncated_frobenius.max(local.relative_frobenius(&dense));
        if err > truncation_bound(&set, k_sigma) {
            report.bound_violations += 1;
        }
    }
    report.elapsed_ms = start.elapsed().as_secs_f64() * 1e3;
    report
}

/// Dense 3×3×3 convolution with zero padding, read back on the input support.
pub fn dense_reference_conv(grid: &SparseFeatureGrid, kernel: &SparseConvKernel) -> SparseFeatureGrid {
    let spec = grid.spec;
    let [nx, ny, nz] = spec.dims;
    let d_in = grid.dim();
    let mut dense = vec![0.0; nx * ny * nz * d_in];
    for (idx, f) in grid.iter() {
        let at = spec.linear_index(idx) * d_in;
        dense[at..at + d_in].copy_from_slice(f);
    }
    let mut out = SparseFeatureGrid::new(spec, kernel.d_out());
    for (idx, _) in grid.iter() {
        let mut acc = vec![0.0; kernel.d_out()];
        for dx in -1i64..=1 {
            for dy in -1i64..=1 {
                for dz in -1i64..=1 {
                    let (x, y, z) = (idx[0] as i64 + dx, idx[1] as i64 + dy, idx[2] as i64 + dz);
                    if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                        continue;
                    }
                    let tap = SparseConvKernel::tap_index([dx, dy, dz]);
                    let at = spec.linear_index([x as usize, y as usize, z as usize]) * d_in;
                    for i in 0..d_in {
                        for (o, a) in acc.iter_mut().enumerate() {
                            *a += kernel.weight(tap, i, o) * dense[at + i];
                        }
                    }
                }
            }
        }
        out.insert(idx, acc).expect("index from the same spec");
    }
    out
}

pub fn sparse_conv_oracle_suite(cases: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let spec = VoxelGridSpec::new(
            [0.0; 3],
            1.0,
            [rng.gen_range(2..8), rng.gen_range(2..8), rng.gen_range(1..5)],
        )?;
        let (d_in, d_out) = (rng.gen_range(1..5), rng.gen_range(1..5));
        let mut grid = SparseFeatureGrid::new(spec, d_in);
        let density = rng.gen_range(0.1..0.6);
        for idx in spec.indices() {
            if rng.gen_bool(density) {
                grid.insert(idx, (0..d_in).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
            }
        }
        let kernel = SparseConvKernel::random(d_in, d_out, &mut rng);
        let fast = sparse_conv3d(&grid, &kernel)?;
        let slow = dense_reference_conv(&grid, &kernel);
        assert_eq!(fast.len(), slow.len());
        for ((ia, a), (ib, b)) in fast.iter().zip(slow.iter()) {
            debug_assert_eq!(ia, ib);
            for (x, y) in a.iter().zip(b) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(OracleReport {
        name: "sparse_conv3d vs dense".into(),
        cases,
        max_abs_error: worst,
        tolerance: 1e-12,
    })
}

/// Forward pass written out loop by loop from the raw layer arrays.
fn mlp_by_hand(net: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = net.layers().len() - 1;
    for (li, layer) in net.layers().iter().enumerate() {
        let mut z = layer.bias().to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            for (j, hj) in h.iter().enumerate() {
                *zo += layer.weight()[o * layer.in_dim() + j] * hj;
            }
        }
        if li != last {
            for v in &mut z {
                *v = match net.activation() {
                    Activation::Silu => *v / (1.0 + (-*v).exp()),
                    Activation::Tanh => v.tanh(),
                };
            }
        }
        h = z;
    }
    h
}

fn softmax_by_hand(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn transcript_2d(query: &[f64], reference: [f64; 2], map: &FeatureMap, w: &AttentionWeights) -> Vec<f64> {
    let offsets = mlp_by_hand(w.offset_net(), query);
    let a = softmax_by_hand(&mlp_by_hand(w.weight_net(), query));
    let mut out = vec![0.0; map.dim()];
    for s in 0..a.len() {
        let (u, v) = (reference[0] + offsets[2 * s], reference[1] + offsets[2 * s + 1]);
        let (x0, y0) = (u.floor(), v.floor());
        let (fx, fy) = (u - x0, v - y0);
        for (dx, dy, cw) in [
            (0.0, 0.0, (1.0 - fx) * (1.0 - fy)),
            (1.0, 0.0, fx * (1.0 - fy)),
            (0.0, 1.0, (1.0 - fx) * fy),
            (1.0, 1.0, fx * fy),
        ] {
            let (x, y) = (x0 + dx, y0 + dy);
            if x >= 0.0 && y >= 0.0 && x < map.width() as f64 && y < map.height() as f64 {
                for (o, f) in out.iter_mut().zip(map.pixel(x as usize, y as usize)) {
                    *o += a[s] * cw * f;
                }
            }
        }
    }
    out
}

fn transcript_3d(
    query: &[f64],
    p: &Vector3<f64>,
    positions: &[Vector3<f64>],
    feats: &QueryMatrix,
    k: usize,
    floor: f64,
    w: &AttentionWeights,
) -> Vec<f64> {
    let offsets = mlp_by_hand(w.offset_net(), query);
    let a = softmax_by_hand(&mlp_by_hand(w.weight_net(), query));
    let mut out = vec![0.0; feats.dim()];
    for s in 0..a.len() {
        let x = p + Vector3::new(offsets[3 * s], offsets[3 * s + 1], offsets[3 * s + 2]);
        let mut order: Vec<(f64, usize)> = positions.iter().enumerate().map(|(i, q)| ((q - x).norm(), i)).collect();
        order.sort_by(|l, r| l.partial_cmp(r).expect("finite distances"));
        let near = &order[..k.min(order.len())];
        let inv: Vec<f64> = near.iter().map(|(d, _)| 1.0 / d.max(floor)).collect();
        let total: f64 = inv.iter().sum();
        for ((_, i), wi) in near.iter().zip(&inv) {
            for (o, f) in out.iter_mut().zip(feats.row(*i)) {
                *o += a[s] * wi / total * f;
            }
        }
    }
    out
}

/// 2D and 3D deformable attention against loop-by-loop transcripts.
pub fn attention_transcript_suite(cases: usize, seed: u64) -> Result<Vec<OracleReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_2d, mut worst_3d) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let act = if rng.gen_bool(0.5) {
            Activation::Silu
        } else {
            Activation::Tanh
        };
        let d = rng.gen_range(1..6);
        let (width, height) = (rng.gen_range(2..12), rng.gen_range(2..12));
        let map = FeatureMap::from_vec(
            width,
            height,
            d,
            (0..width * height * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )?;
        let w2 = AttentionWeights::random(d, 2, rng.gen_range(1..6), &[rng.gen_range(2..10)], act, &mut rng);
        let q: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let reference = [rng.gen_range(-1.0..width as f64), rng.gen_range(-1.0..height as f64)];
        let got = deformable_attn_2d(&q, reference, &map, &w2);
        for (x, y) in got.iter().zip(transcript_2d(&q, reference, &map, &w2)) {
            worst_2d = worst_2d.max((x - y).abs());
        }

        let n = rng.gen_range(1..40);
        let k = rng.gen_range(1..6);
        let positions: Vec<_> = (0..n)
            .map(|_| Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0)))
            .collect();
        let feats = QueryMatrix::from_vec(n, d, (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let floor = 1e-6;
        let field = ValueField::new(positions.clone(), feats.clone(), &ValueSampling::Knn { k, floor })?;
        let w3 = AttentionWeights::random(d, 3, rng.gen_range(1..6), &[rng.gen_range(2..10)], act, &mut rng);
        let p = Vector3::from_fn(|_, _| rng.gen_range(-3.0..3.0));
        let got = deformable_attn_3d(&q, &p, &field, &w3)?;
        for (x, y) in got.iter().zip(transcript_3d(&q, &p, &positions, &feats, k, floor, &w3)) {
            worst_3d = worst_3d.max((x - y).abs());
        }
    }
    Ok(vec![
        OracleReport {
            name: "deformable_attn_2d transcript".into(),
            cases,
            max_abs_error: worst_2d,
            tolerance: 1e-12,
        },
        OracleReport {
            name: "deformable_attn_3d transcript".into(),
            cases,
            max_abs_error: worst_3d,
            tolerance: 1e-12,
        },
    ])
}
