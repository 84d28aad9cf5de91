use std::hint::black_box;

use convprior::decoder::NormGrad;
use convprior::spectral::{circular_convolve, dual_kernel};
use convprior::{DecoderConfig, DecoderState, GeneratorConfig, GeneratorState, Kernel, KernelPreset, Variant};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn convolution(c: &mut Criterion) {
    let mut group = c.benchmark_group("circular_convolve");
    for n in [256usize, 4096] {
        let a: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..n).map(|i| (i as f64 * 0.11).cos()).collect();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| circular_convolve(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn dual(c: &mut Criterion) {
    let kernel = Kernel::from_preset(&KernelPreset::Triangular { width: 15 }, 1024).unwrap();
    c.bench_function("dual_kernel/tri15/1024", |b| b.iter(|| dual_kernel(black_box(&kernel)).unwrap()));
}

fn generator(c: &mut Criterion) {
    let n = 256;
    let mut group = c.benchmark_group("generator");
    for k in [256usize, 2048] {
        let cfg = GeneratorConfig {
            k,
            kernel: Kernel::from_preset(&KernelPreset::Triangular { width: 15 }, n).unwrap(),
            omega: 0.1,
            seed: 0,
        };
        let state = GeneratorState::init(&cfg).unwrap();
        let y: Vec<f64> = (0..n).map(|i| (i as f64 * 0.05).sin()).collect();
        group.bench_with_input(BenchmarkId::new("forward", k), &k, |b, _| b.iter(|| state.forward().unwrap()));
        group.bench_with_input(BenchmarkId::new("gradient", k), &k, |b, _| {
            b.iter(|| state.gradient(black_box(&y)).unwrap())
        });
    }
    group.finish();
}

fn decoder(c: &mut Criterion) {
    let mut group = c.benchmark_group("decoder");
    for variant in [Variant::BilinearUpsample, Variant::FixedKernelNoUpsample, Variant::LearnedConv] {
        let state = DecoderState::init(&DecoderConfig::new(2, 64, 256, variant, 0)).unwrap();
        let y = vec![0.5; 256];
        let name = format!("{variant:?}");
        group.bench_function(BenchmarkId::new("forward", &name), |b| b.iter(|| state.forward()));
        group.bench_function(BenchmarkId::new("backward", &name), |b| {
            let cache = state.forward_cached();
            let g: Vec<f64> = cache.output().iter().zip(&y).map(|(a, t)| a - t).collect();
            b.iter(|| state.backward(&cache, black_box(&g), NormGrad::Full).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, convolution, dual, generator, decoder);
criterion_main!(benches);
