use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use spoofnet::evaluation::{compute_eer, compute_min_tdcf, TdcfParams};
use spoofnet::frontend::{lfcc, LfccConfig};
use spoofnet::numerics::{Conv2dParams, Graph, Tensor};
use spoofnet_bench::{chirp, pseudo_random, score_set};

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv2d");
    // Stage-1 sized and stage-3 sized layers on a 96-frame crop.
    for (cin, cout, h, w) in [(64usize, 64usize, 18usize, 96usize), (128, 256, 9, 48)] {
        let x = pseudo_random(cin * h * w, 1);
        let k = pseudo_random(cout * cin * 9, 2);
        let id = format!("{cin}x{h}x{w}->{cout}");
        let p = Conv2dParams::new((1, 1), (1, 1));
        group.bench_with_input(BenchmarkId::new("forward", &id), &(), |b, _| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let xv = g.constant(Tensor::from_f64([1, cin, h, w], &x).unwrap());
                let kv = g.constant(Tensor::from_f64([cout, cin, 3, 3], &k).unwrap());
                black_box(g.conv2d(xv, kv, None, p).unwrap());
            })
        });
        group.bench_with_input(BenchmarkId::new("forward_backward", &id), &(), |b, _| {
            b.iter(|| {
                let mut g = Graph::<f32>::new();
                let xv = g.leaf(Tensor::from_f64([1, cin, h, w], &x).unwrap());
                let kv = g.leaf(Tensor::from_f64([cout, cin, 3, 3], &k).unwrap());
                let y = g.conv2d(xv, kv, None, p).unwrap();
                let s = g.sum_all(y).unwrap();
                black_box(g.backward(s).unwrap());
            })
        });
    }
    group.finish();
}

fn frontend(c: &mut Criterion) {
    let cfg = LfccConfig::default();
    let mut group = c.benchmark_group("lfcc");
    for seconds in [1.0, 4.0] {
        let w = chirp(seconds);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{seconds}s")), &w, |b, w| {
            b.iter(|| black_box(lfcc(w, &cfg).unwrap()))
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let p = TdcfParams::default();
    let mut group = c.benchmark_group("metrics");
    for n in [1_000usize, 70_000] {
        let set = score_set(n);
        group.bench_with_input(BenchmarkId::new("eer", n), &set, |b, s| {
            b.iter(|| black_box(compute_eer(s).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("min_tdcf", n), &set, |b, s| {
            b.iter(|| black_box(compute_min_tdcf(s, &p).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, conv, frontend, metrics);
criterion_main!(benches);
