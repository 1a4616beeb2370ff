use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hdmba::haze::derive_seed;
use hdmba::network::{DehazeModel, ModelConfig};
use hdmba::params::ParamStore;
use hdmba::ssm::{scan, SsmConfig};
use hdmba::wssm::{wssm_forward, BlockFeatures, MambaBlockParams};
use hdmba::Tensor;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn uniform(seed: u64, n: usize, lo: f32, hi: f32) -> Vec<f32> {
    (0..n).map(|i| lo + (hi - lo) * (derive_seed(seed, i as u64) >> 40) as f32 / (1u64 << 24) as f32).collect()
}

fn t(seed: u64, shape: &[usize], lo: f32, hi: f32) -> Tensor<f32> {
    Tensor::from_vec(shape, uniform(seed, shape.iter().product(), lo, hi)).unwrap()
}

fn bench_scan(c: &mut Criterion) {
    let mut g = c.benchmark_group("scan");
    let (d, n) = (32, 16);
    for l in [256, 1024, 4096] {
        let u = t(1, &[1, l, d], -1.0, 1.0);
        let dt = t(2, &[1, l, d], 0.01, 0.5);
        let a = t(3, &[d, n], -1.0, 1.0);
        let b = t(4, &[1, l, n], -1.0, 1.0);
        let cc = t(5, &[1, l, n], -1.0, 1.0);
        let skip = t(6, &[d], -1.0, 1.0);
        g.bench_with_input(BenchmarkId::from_parameter(l), &l, |bch, _| {
            bch.iter(|| black_box(scan(&u, &dt, &a, &b, &cc, &skip).unwrap()))
        });
    }
    g.finish();
}

fn bench_wssm(c: &mut Criterion) {
    let mut g = c.benchmark_group("wssm_forward");
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let block = MambaBlockParams::init(&mut store, "b", 32, &SsmConfig::default(), BlockFeatures::default(), &mut rng).unwrap();
    let z = t(7, &[1, 32, 32, 32], -1.0, 1.0);
    for m in [4, 8, 16] {
        g.bench_with_input(BenchmarkId::from_parameter(m), &m, |bch, &m| bch.iter(|| black_box(wssm_forward(&store, &block, &z, m).unwrap())));
    }
    g.finish();
}

fn bench_conv(c: &mut Criterion) {
    let x = t(8, &[1, 64, 64, 32], -1.0, 1.0);
    let w = t(9, &[3, 3, 32, 32], -0.1, 0.1);
    c.bench_function("conv2d_3x3_64x64x32", |b| b.iter(|| black_box(x.conv2d(&w, None).unwrap())));
}

fn bench_model(c: &mut Criterion) {
    let model = DehazeModel::<f32>::new(ModelConfig::tiny(16), 0).unwrap();
    let x = t(10, &[1, 32, 32, 16], 0.0, 1.0);
    let target = t(11, &[1, 32, 32, 16], 0.0, 1.0);
    c.bench_function("model_forward_tiny_32x32x16", |b| b.iter(|| black_box(model.forward(&x).unwrap())));
    c.bench_function("model_forward_backward_tiny_32x32x16", |b| {
        b.iter(|| {
            model.params.zero_grads();
            let l = model.loss(&model.forward(&x).unwrap(), &target).unwrap();
            l.backward().unwrap();
        })
    });
}

criterion_group!(benches, bench_scan, bench_wssm, bench_conv, bench_model);
criterion_main!(benches);
