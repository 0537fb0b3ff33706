use std::hint::black_box;

use amips_bench::fixture;
use amips_core::ivf::{build_ivf, default_cells, search_ivf};
use amips_core::oracle::{support_and_argmax, top_k};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn exact(c: &mut Criterion) {
    let f = fixture();
    let q = f.val.row_f64(0);
    let mut g = c.benchmark_group("exact");
    g.bench_function("argmax", |b| b.iter(|| black_box(support_and_argmax(&q, &f.keys, None).unwrap())));
    for k in [1, 10, 100] {
        g.bench_with_input(BenchmarkId::new("top_k", k), &k, |b, &k| {
            b.iter(|| black_box(top_k(&q, &f.keys, k).unwrap()))
        });
    }
    g.finish();
}

fn ivf(c: &mut Criterion) {
    let f = fixture();
    let cells = default_cells(f.keys.rows());
    let index = build_ivf(&f.keys, cells, 0).unwrap();
    let q = f.val.row_f64(0);
    let mut g = c.benchmark_group("ivf");
    g.bench_function("build", |b| b.iter(|| black_box(build_ivf(&f.keys, cells, 0).unwrap())));
    for n_probe in [1, 4, 16, cells] {
        g.bench_with_input(BenchmarkId::new("search_k10", n_probe), &n_probe, |b, &np| {
            b.iter(|| black_box(search_ivf(&index, &q, np, 10).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, exact, ivf);
criterion_main!(benches);
