use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use recsim_core::metrics::{harrell_c, harrell_per_event, kim_c, RiskScores, TieCredit};
use recsim_core::{generate_scenario, ScenarioSpec};

fn concordance(c: &mut Criterion) {
    let mut group = c.benchmark_group("concordance");
    for n in [100, 1000] {
        let spec = ScenarioSpec { n, p: 5, max_events: Some(20), ..ScenarioSpec::default() };
        let (data, truth) = generate_scenario(&spec, 0).unwrap();
        let scores: Vec<f64> = data
            .subjects()
            .iter()
            .map(|s| s.covariates.iter().zip(&truth.beta).map(|(x, b)| x * b).sum())
            .collect();
        let scores = RiskScores::new(scores).unwrap();
        let times: Vec<f64> = data.subjects().iter().map(|s| s.event_times.first().copied().unwrap_or(s.censoring_time)).collect();
        let events: Vec<bool> = data.subjects().iter().map(|s| !s.event_times.is_empty()).collect();
        group.bench_with_input(BenchmarkId::new("harrell", n), &n, |b, _| {
            b.iter(|| harrell_c(black_box(&times), &events, &scores, TieCredit::Zero).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("harrell_per_event", n), &n, |b, _| {
            b.iter(|| harrell_per_event(black_box(&data), &scores, TieCredit::Zero).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("kim", n), &n, |b, _| {
            b.iter(|| kim_c(black_box(&data), &scores, TieCredit::Zero).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, concordance);
criterion_main!(benches);
