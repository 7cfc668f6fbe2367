//! Parallel versus sequential paths. Without the `parallel` feature the
//! parallel entries fall back to the sequential code and should tie.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use mhgan::gradcheck::registry;
use mhgan::par;
use mhgan::rng::LabRng;
use mhgan::tensor::kernels::{gemm_seq, Layout};
use mhgan::train::{run, sweep, TrainConfig};
use rand::Rng;

fn matrix(rng: &mut LabRng, len: usize) -> Vec<f32> {
    (0..len).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

#[cfg(feature = "parallel")]
fn gemm_parallel(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    mhgan::tensor::kernels::gemm_par(Layout::NN, m, k, n, a, b, 0.0, c)
}

#[cfg(not(feature = "parallel"))]
fn gemm_parallel(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    gemm_seq(Layout::NN, m, k, n, a, b, 0.0, c)
}

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("gemm");
    let mut rng = LabRng::seed(0);
    // Training batch and evaluation batch through a 64-wide layer.
    for &(m, k, n) in &[(128, 64, 64), (4096, 64, 64)] {
        let (a, b) = (matrix(&mut rng, m * k), matrix(&mut rng, k * n));
        let mut out = vec![0.0f32; m * n];
        let id = format!("{m}x{k}x{n}");
        group.bench_with_input(BenchmarkId::new("seq", &id), &(), |bch, _| {
            bch.iter(|| gemm_seq(Layout::NN, m, k, n, black_box(&a), black_box(&b), 0.0, &mut out))
        });
        group.bench_with_input(BenchmarkId::new("par", &id), &(), |bch, _| {
            bch.iter(|| gemm_parallel(m, k, n, black_box(&a), black_box(&b), &mut out))
        });
    }
    group.finish();
}

fn gradient_suite(c: &mut Criterion) {
    let cases = registry();
    let mut group = c.benchmark_group("gradient_suite");
    group.sample_size(10);
    group.bench_function("seq", |b| b.iter(|| par::map_seq(&cases, |case| case.run(None))));
    group.bench_function("par", |b| b.iter(|| par::map(&cases, |case| case.run(None))));
    group.finish();
}

fn seed_sweep(c: &mut Criterion) {
    let cfgs: Vec<TrainConfig> = (0..4)
        .map(|seed| TrainConfig { seed, total_steps: 50, eval_interval: 50, n_eval: 512, ..TrainConfig::default() })
        .collect();
    let mut group = c.benchmark_group("seed_sweep");
    group.sample_size(10);
    group.bench_function("seq", |b| b.iter(|| par::map_seq(&cfgs, |cfg| run(cfg, None).is_ok())));
    group.bench_function("par", |b| b.iter(|| sweep(&cfgs).iter().all(|r| r.is_ok())));
    group.finish();
}

criterion_group!(benches, gemm, gradient_suite, seed_sweep);
criterion_main!(benches);
