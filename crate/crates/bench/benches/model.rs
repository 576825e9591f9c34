use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hdrlift_bench::{desk_model, scenes};
use hdrlift_core::diffusion::{sample, sample_batch, TrainConfig, Trainer};

fn training_step(c: &mut Criterion) {
    let (ldrs, hdrs) = scenes(8, 64);
    let model = desk_model();
    let batch = model.batch(&ldrs, &hdrs).unwrap();
    let mut tr = Trainer::new(model, TrainConfig { lr: 1e-3, ..Default::default() }).unwrap();
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("desk step batch 8", |b| b.iter(|| black_box(tr.step(&batch).unwrap())));
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let (ldrs, _) = scenes(8, 64);
    let model = desk_model();
    let mut g = c.benchmark_group("sample");
    g.sample_size(10);
    g.bench_function("desk 1 image 50 steps", |b| b.iter(|| sample(&model, black_box(&ldrs[0]), 50, 1).unwrap()));
    let seeds: Vec<u64> = (0..8).collect();
    g.bench_function("desk 8 images 10 steps", |b| b.iter(|| sample_batch(&model, black_box(&ldrs), 10, &seeds).unwrap()));
    g.finish();
}

criterion_group!(benches, training_step, sampling);
criterion_main!(benches);
