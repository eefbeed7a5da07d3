use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use predpool_bench::{matrix, params, strategies};
use predpool_core::canonical;
use predpool_core::incentive::score_task;
use predpool_core::truth_discovery::{run_truth_discovery, TdConfig};
use predpool_core::Format;

fn truth_discovery(c: &mut Criterion) {
    let mut g = c.benchmark_group("truth_discovery");
    for format in [Format::Abstract, Format::Rank, Format::Measurement] {
        let mx = matrix(6, 1000, 10, format, 1);
        g.bench_with_input(BenchmarkId::from_parameter(format), &mx, |b, mx| {
            b.iter(|| run_truth_discovery(black_box(mx), &TdConfig::default()).unwrap())
        });
    }
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let mx = matrix(6, 1000, 10, Format::Measurement, 2);
    let s = strategies(&mx);
    let p = params(6, 1000);
    c.bench_function("score_task/6x1000", |b| {
        b.iter(|| score_task(mx.providers(), mx.queries(), black_box(&s), &p, 7).unwrap())
    });
}

fn serialization(c: &mut Criterion) {
    let mx = matrix(6, 1000, 10, Format::Measurement, 3);
    let est = run_truth_discovery(&mx, &TdConfig::default()).unwrap();
    c.bench_function("canonical/aggregates_1000", |b| {
        b.iter(|| canonical::aggregates("task", mx.queries(), black_box(&est.truths)))
    });
    c.bench_function("canonical/number", |b| b.iter(|| canonical::number(black_box(0.123456789123))));
}

criterion_group!(benches, truth_discovery, scoring, serialization);
criterion_main!(benches);
