//! Parallel against sequential execution of the hot kernels.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dfca_core::model::{DfcaNet, ModelConfig};
use dfca_core::nn::Mode;
use dfca_core::tensor::Padding;
use dfca_core::train::count;
use dfca_core::{par, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn conv(c: &mut Criterion) {
    let x = noise(&[8, 56, 56, 32], 1);
    let k = noise(&[3, 3, 32, 32], 2);
    let mut group = c.benchmark_group("conv3x3_fwd_bwd");
    group.sample_size(10);
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let xv = g.leaf(x.clone(), true);
                let kv = g.leaf(k.clone(), true);
                let y = g.conv2d(xv, kv, None, (1, 1), Padding::Same).unwrap();
                let l = g.sum(y).unwrap();
                g.backward(l).unwrap();
                black_box(g.grad(kv).map(|t| t.len()))
            })
        });
    }
    group.finish();
}

fn pool_and_resize(c: &mut Criterion) {
    let x = noise(&[8, 56, 56, 64], 3);
    let mut group = c.benchmark_group("avgpool_upsample");
    group.sample_size(20);
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let xv = g.constant(x.clone());
                let p = g.avg_pool(xv, (7, 7), (7, 7), true).unwrap();
                let u = g.upsample_bilinear(p, (56, 56)).unwrap();
                black_box(g.value(u).len())
            })
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let scores: Vec<f64> = (0..1_000_000).map(|_| r.gen()).collect();
    let labels: Vec<usize> = (0..1_000_000).map(|_| r.gen_range(0..2)).collect();
    let mut group = c.benchmark_group("count_1m");
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(count(&scores, &labels, 0.5).unwrap()))
        });
    }
    group.finish();
}

fn model_forward(c: &mut Criterion) {
    let cfg = ModelConfig {
        image_size: 112,
        ..ModelConfig::default()
    };
    let mut net = DfcaNet::<f32>::new(cfg, 0).unwrap();
    net.set_mode(Mode::Infer);
    let images = noise(&[2, 112, 112, 3], 5).map(|v| 0.5 + 0.5 * v);
    let mut group = c.benchmark_group("dfcanet_predict_112px");
    group.sample_size(10);
    for (name, on) in MODES {
        par::set_parallel(on);
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| black_box(net.predict(&images).unwrap()))
        });
    }
    group.finish();
    par::set_parallel(true);
}

criterion_group!(benches, conv, pool_and_resize, metrics, model_forward);
criterion_main!(benches);
