//! The same work on a one-thread pool and on the default pool. Build with
//! `--no-default-features` to measure the plain sequential fallback instead.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use degnse_core::noise::Model;
use degnse_core::nonlinearity::convective_term;
use degnse_core::parallel::with_workers;
use degnse_core::pseudospectral::GridConvolver;
use degnse_core::simulator::{random_w_sphere, stopping_time_tail};

const POOLS: [(&str, Option<usize>); 2] = [("one-thread", Some(1)), ("default", None)];

fn convective(c: &mut Criterion) {
    let mut group = c.benchmark_group("convective");
    group.sample_size(10);
    for n in [3usize, 4] {
        let model = Model::canonical(n, 1, 1, 1.0, 1.0, 0.0).unwrap();
        let u = random_w_sphere(&model, 1.0, 1);
        let grid = GridConvolver::new(n).unwrap();
        for (label, workers) in POOLS {
            group.bench_with_input(BenchmarkId::new(format!("pairwise/{label}"), n), &u, |b, u| {
                b.iter(|| with_workers(workers, || convective_term(black_box(u), n).unwrap()))
            });
            group.bench_with_input(BenchmarkId::new(format!("fft/{label}"), n), &u, |b, u| {
                b.iter(|| with_workers(workers, || grid.convective(black_box(u), n).unwrap()))
            });
        }
    }
    group.finish();
}

fn replicas(c: &mut Criterion) {
    let mut group = c.benchmark_group("stopping_time_replicas");
    group.sample_size(10);
    let model = Model::canonical(2, 1, 1, 1.0, 1.0, 0.0).unwrap();
    let x = random_w_sphere(&model, 0.5, 2);
    for (label, workers) in POOLS {
        group.bench_function(label, |b| {
            b.iter(|| with_workers(workers, || stopping_time_tail(&x, 0.1, &model, 1e-2, 16, 7).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, convective, replicas);
criterion_main!(benches);
