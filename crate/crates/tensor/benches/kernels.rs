use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kshot_tensor::kernels::{conv2d, instance_norm, matmul};
use kshot_tensor::{par, ConvSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f32>::randn(&[16, 32, 16, 16], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[32, 32, 3, 3], 0.1, &mut rng);
    let mut group = c.benchmark_group("conv2d_16x32x16x16_k3");
    for (name, on) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::with_mode(on, || b.iter(|| conv2d(black_box(&x), black_box(&w), ConvSpec::new(1, 1)).unwrap()))
        });
    }
    group.finish();
}

fn gemm(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::<f32>::randn(&[256, 512], 1.0, &mut rng);
    let w = Tensor::<f32>::randn(&[512, 256], 1.0, &mut rng);
    let mut group = c.benchmark_group("matmul_256x512x256");
    for (name, on) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::with_mode(on, || b.iter(|| matmul(black_box(&a), false, black_box(&w), false).unwrap()))
        });
    }
    group.finish();
}

fn norm(c: &mut Criterion) {
    let x = Tensor::<f32>::randn(&[16, 64, 16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let mut group = c.benchmark_group("instance_norm_16x64x16x16");
    for (name, on) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            par::with_mode(on, || b.iter(|| instance_norm(black_box(&x), 1e-5).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, gemm, norm);
criterion_main!(benches);
