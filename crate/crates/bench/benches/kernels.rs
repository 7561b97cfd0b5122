use std::hint::black_box;

use constyle_bench::card;
use constyle_core::degrade::{batch_policy, gaussian_kernel, jpeg_roundtrip, PolicyConfig};
use constyle_core::forge::plan_crops;
use constyle_core::image::convolve2d;
use constyle_core::metrics::ssim;
use constyle_core::prompter::{pretrain_step, EncoderConfig, LossWeights, PretrainState, ToyDataset, TrainConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn convolution(c: &mut Criterion) {
    let img = card(64, 64);
    let mut g = c.benchmark_group("convolve2d_64x64");
    for size in [7usize, 13, 21] {
        let k = gaussian_kernel(2.0, 1.0, 0.5, size).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(size), &k, |b, k| {
            b.iter(|| convolve2d(black_box(&img), k).unwrap())
        });
    }
    g.finish();
}

fn jpeg(c: &mut Criterion) {
    let img = card(128, 128);
    c.bench_function("jpeg_q30_128x128", |b| b.iter(|| jpeg_roundtrip(black_box(&img), 30, true).unwrap()));
}

fn metrics(c: &mut Criterion) {
    let a = card(256, 256);
    let b2 = a.map(|v| (v * 0.9 + 0.05).min(1.0));
    c.bench_function("ssim_256x256", |b| b.iter(|| ssim(black_box(&a), black_box(&b2)).unwrap()));
}

fn degradation(c: &mut Criterion) {
    let batch = vec![card(64, 64); 32];
    let policy = PolicyConfig::default();
    c.bench_function("batch_policy_32x64x64", |b| {
        b.iter(|| batch_policy(black_box(&batch), 1, &policy).unwrap())
    });
}

fn tiling(c: &mut Criterion) {
    c.bench_function("plan_crops_4096", |b| b.iter(|| plan_crops(black_box(4096), 4096, 256, 150).unwrap()));
}

fn training(c: &mut Criterion) {
    let enc = EncoderConfig::default();
    let train = TrainConfig::default();
    let data = ToyDataset::generate(4, enc.input_size, 0).unwrap();
    let (imgs, labels) = (&data.images[..train.batch_size], &data.labels[..train.batch_size]);
    let weights = LossWeights::default();
    let policy = PolicyConfig::default();
    let mut g = c.benchmark_group("pretrain");
    g.sample_size(10);
    g.bench_function("step_batch32_32x32", |b| {
        let mut state = PretrainState::new(&enc, &train, 0).unwrap();
        let mut seed = 0;
        b.iter(|| {
            seed += 1;
            pretrain_step(&mut state, &enc, imgs, labels, &weights, &train, &policy, seed).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, convolution, jpeg, metrics, degradation, tiling, training);
criterion_main!(benches);
