use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gid_bench::{blobs, random_cost, random_logits};
use gid_core::{hungarian, kmeans, sinkhorn_pseudo_labels, KMeansConfig, SinkhornProblem};
use std::hint::black_box;

fn bench_hungarian(c: &mut Criterion) {
    let mut g = c.benchmark_group("hungarian");
    for k in [8, 60, 150] {
        let cost = random_cost(k, k as u64);
        g.bench_with_input(BenchmarkId::from_parameter(k), &cost, |b, cost| {
            b.iter(|| hungarian(black_box(cost)))
        });
    }
    g.finish();
}

fn bench_sinkhorn(c: &mut Criterion) {
    let mut g = c.benchmark_group("sinkhorn");
    for (batch, m, iters) in [(512, 60, 3), (512, 60, 100), (64, 8, 1000)] {
        let logits = random_logits(batch, m, 1);
        let id = format!("{batch}x{m}/{iters}");
        g.bench_function(id, |b| {
            b.iter(|| {
                let p = SinkhornProblem::new(logits.clone()).with_iters(iters);
                sinkhorn_pseudo_labels(black_box(&p)).unwrap()
            })
        });
    }
    g.finish();
}

fn bench_kmeans(c: &mut Criterion) {
    let mut g = c.benchmark_group("kmeans");
    g.sample_size(10);
    for (k, dim) in [(10, 32), (60, 64)] {
        let data = blobs(k, 100, dim, 3);
        g.bench_function(format!("k{k}_d{dim}"), |b| {
            b.iter(|| kmeans(black_box(&data), &KMeansConfig::new(k, 0)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_hungarian, bench_sinkhorn, bench_kmeans);
criterion_main!(benches);
