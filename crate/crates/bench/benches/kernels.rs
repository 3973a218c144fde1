use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use metainfluence::hessian::{accumulate_gn, invert};
use metainfluence::linalg::eigh_symmetric;
use metainfluence::Keep;
use metainfluence_bench::{meta_params, symmetric, tasks};
use std::hint::black_box;

fn eigh(c: &mut Criterion) {
    let mut g = c.benchmark_group("eigh_symmetric");
    g.sample_size(10);
    for n in [64, 128, 256] {
        let a = symmetric(n);
        g.bench_with_input(BenchmarkId::from_parameter(n), &a, |b, a| b.iter(|| eigh_symmetric(black_box(a))));
    }
    g.finish();
}

fn derivatives(c: &mut Criterion) {
    let mp = meta_params(34, 32, 5);
    let task = tasks(34, 5, 1).remove(0);
    let v = vec![0.01; mp.q()];
    c.bench_function("hvp q=1285", |b| b.iter(|| mp.model.hvp(black_box(&mp.omega), &task.support, &v)));
    c.bench_function("meta_grad q=1285", |b| b.iter(|| mp.meta_grad(black_box(&task))));
}

fn gauss_newton(c: &mut Criterion) {
    let mp = meta_params(16, 16, 5);
    let ts = tasks(16, 5, 16);
    let mut g = c.benchmark_group("accumulate_gn");
    g.sample_size(10);
    for cap in [32, 128] {
        g.bench_with_input(BenchmarkId::from_parameter(cap), &cap, |b, &cap| {
            b.iter(|| accumulate_gn(&mp, black_box(&ts), cap))
        });
    }
    g.finish();
    let h = accumulate_gn(&mp, &ts, 128).unwrap();
    c.bench_function("invert factored capacity=128", |b| b.iter(|| invert(black_box(&h), Keep::Count(128))));
}

criterion_group!(benches, eigh, derivatives, gauss_newton);
criterion_main!(benches);
