use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use gaussocc_bench::{conv_kernel, gaussian_set, sparse_grid};
use gaussocc_core::splatter::{sparse_conv3d, splat, SplatOptions};
use gaussocc_core::{eval_mixture, Vector3, VoxelGridSpec};

fn desk_grid() -> VoxelGridSpec {
    VoxelGridSpec::centered(0.5, [64, 64, 8]).unwrap()
}

fn bench_splat(c: &mut Criterion) {
    let spec = desk_grid();
    let mut group = c.benchmark_group("splat");
    group.sample_size(20);
    for p in [128, 512, 2048] {
        let set = gaussian_set(&spec, p, 16, 1);
        group.throughput(Throughput::Elements(p as u64));
        group.bench_with_input(BenchmarkId::new("k3_sequential", p), &set, |b, set| {
            b.iter(|| splat(black_box(set), &spec, &SplatOptions::with_k_sigma(3.0)))
        });
        let parallel = SplatOptions {
            k_sigma: 3.0,
            workers: 4,
            deterministic: false,
        };
        group.bench_with_input(BenchmarkId::new("k3_parallel", p), &set, |b, set| {
            b.iter(|| splat(black_box(set), &spec, &parallel))
        });
    }
    let small = VoxelGridSpec::new([0.0; 3], 1.0, [32, 32, 8]).unwrap();
    let set = gaussian_set(&small, 50, 16, 2);
    group.bench_function("exact_32x32x8_p50", |b| {
        b.iter(|| splat(black_box(&set), &small, &SplatOptions::exact()))
    });
    group.finish();
}

fn bench_eval(c: &mut Criterion) {
    let spec = desk_grid();
    let mut group = c.benchmark_group("eval_mixture");
    for p in [64, 512] {
        let set = gaussian_set(&spec, p, 16, 3);
        let point = Vector3::new(0.3, -1.2, 0.4);
        group.throughput(Throughput::Elements(p as u64));
        group.bench_with_input(BenchmarkId::from_parameter(p), &set, |b, set| {
            b.iter(|| eval_mixture(black_box(set), black_box(&point)))
        });
    }
    group.finish();
}

fn bench_sparse_conv(c: &mut Criterion) {
    let spec = VoxelGridSpec::centered(0.5, [32, 32, 8]).unwrap();
    let mut group = c.benchmark_group("sparse_conv3d");
    group.sample_size(20);
    for density in [0.05, 0.25] {
        let grid = sparse_grid(&spec, 64, density, 4);
        let kernel = conv_kernel(64, 64, 5);
        group.throughput(Throughput::Elements(grid.len() as u64));
        group.bench_with_input(BenchmarkId::new("d64", density), &grid, |b, grid| {
            b.iter(|| sparse_conv3d(black_box(grid), &kernel).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_splat, bench_eval, bench_sparse_conv);
criterion_main!(benches);
