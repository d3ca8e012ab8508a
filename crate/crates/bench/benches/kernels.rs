use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use multitoken_bench::hourly_like;
use multitoken_core::{mpsd, rfft_magnitude, top_k_periods};

fn spectrum(c: &mut Criterion) {
    let mut g = c.benchmark_group("rfft_magnitude");
    for len in [336, 1680, 8640] {
        let x = hourly_like(1, len, 2);
        g.bench_with_input(BenchmarkId::from_parameter(len), &x, |b, x| {
            b.iter(|| rfft_magnitude(black_box(x.channel(0))).unwrap())
        });
    }
    g.finish();
    let train = hourly_like(7, 10452, 3);
    c.bench_function("top_k_periods/7x10452", |b| {
        b.iter(|| top_k_periods(black_box(&train), 3).unwrap())
    });
}

fn decomposition(c: &mut Criterion) {
    let mut g = c.benchmark_group("mpsd");
    for (len, periods) in [(336, vec![12, 24]), (1680, vec![24, 168, 720])] {
        let x = hourly_like(7, len, 4);
        g.bench_with_input(BenchmarkId::from_parameter(len), &x, |b, x| {
            b.iter(|| mpsd(black_box(x), &periods, 96).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, spectrum, decomposition);
criterion_main!(benches);
