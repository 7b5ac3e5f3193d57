use std::hint::black_box;

use charcl_bench::random_pair;
use charcl_core::metrics::{b_cubed, blanc, ceaf_phi4, micro_macro_f1, GoldPredPair};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn coref(c: &mut Criterion) {
    let mut group = c.benchmark_group("coref");
    for n in [20, 100, 400] {
        let (g, p) = random_pair(n, n / 4, 1);
        let pair = GoldPredPair::new(&g, &p).unwrap();
        group.bench_with_input(BenchmarkId::new("b_cubed", n), &pair, |b, pair| b.iter(|| b_cubed(black_box(pair))));
        group.bench_with_input(BenchmarkId::new("ceaf_phi4", n), &pair, |b, pair| b.iter(|| ceaf_phi4(black_box(pair))));
        group.bench_with_input(BenchmarkId::new("blanc", n), &pair, |b, pair| b.iter(|| blanc(black_box(pair))));
    }
    group.finish();
}

fn classification(c: &mut Criterion) {
    let gold: Vec<usize> = (0..10_000).map(|i| (i * 7) % 13).collect();
    let pred: Vec<usize> = (0..10_000).map(|i| (i * 5) % 13).collect();
    c.bench_function("micro_macro_f1/10000", |b| b.iter(|| micro_macro_f1(black_box(&gold), black_box(&pred), 13)));
}

criterion_group!(benches, coref, classification);
criterion_main!(benches);
