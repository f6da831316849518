use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use recsim_core::{generate_scenario, ScenarioSpec};

fn replicates(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate_scenario");
    for p in [25, 150] {
        let spec = ScenarioSpec { p, max_events: Some(20), ..ScenarioSpec::default() };
        group.bench_with_input(BenchmarkId::from_parameter(p), &spec, |b, spec| {
            b.iter(|| generate_scenario(black_box(spec), 0).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, replicates);
criterion_main!(benches);
