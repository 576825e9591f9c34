use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use hdrlift_bench::scenes;
use hdrlift_core::hdr::{read_rgbe, write_rgbe, ToneCurve};
use hdrlift_core::metrics::{evaluate, psnr_mu, ssim_linear, toy_perceptual, EvalPair, MetricConfig};
use hdrlift_core::nn::{Conv2d, ParamStore};
use hdrlift_core::tape::Tape;
use hdrlift_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let layer = Conv2d::same3(&mut store, "c", 32, 32, &mut rng);
    let x = Tensor::randn(&[8, 32, 32, 32], &mut rng);
    c.bench_function("conv3x3 32->32 8x32x32 fwd+bwd", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = layer.forward(&mut tape, &store, xv);
            let s = tape.square(y);
            let l = tape.mean_all(s);
            black_box(tape.backward(l));
        })
    });
}

fn metrics(c: &mut Criterion) {
    let (_, hdrs) = scenes(2, 64);
    let curve = ToneCurve::default();
    c.bench_function("psnr_mu 64x64", |b| b.iter(|| psnr_mu(black_box(&hdrs[0]), black_box(&hdrs[1]), &curve)));
    c.bench_function("ssim 64x64", |b| b.iter(|| ssim_linear(black_box(&hdrs[0]), black_box(&hdrs[1]))));
    c.bench_function("perceptual 64x64", |b| b.iter(|| toy_perceptual(black_box(&hdrs[0]), black_box(&hdrs[1]))));
    let (_, more) = scenes(8, 64);
    let pairs: Vec<EvalPair> = more
        .iter()
        .enumerate()
        .map(|(i, h)| EvalPair { id: i.to_string(), gt: h.clone(), pred: more[(i + 1) % 8].clone() })
        .collect();
    let cfg = MetricConfig::default();
    c.bench_function("evaluate 8 pairs", |b| b.iter(|| evaluate(black_box(&pairs), &cfg, 1)));
}

fn rgbe(c: &mut Criterion) {
    let (_, hdrs) = scenes(1, 256);
    let mut buf = Vec::new();
    write_rgbe(&hdrs[0], &mut buf).unwrap();
    c.bench_function("rgbe write 256x256", |b| {
        b.iter(|| {
            let mut out = Vec::with_capacity(buf.len());
            write_rgbe(black_box(&hdrs[0]), &mut out).unwrap();
            out
        })
    });
    c.bench_function("rgbe read 256x256", |b| b.iter(|| read_rgbe(black_box(buf.as_slice())).unwrap()));
}

criterion_group!(benches, conv, metrics, rgbe);
criterion_main!(benches);
