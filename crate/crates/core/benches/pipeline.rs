//! Batch scoring, calibration and generation on one thread versus the
//! default rayon pool. Build with `--no-default-features` to time the plain
//! sequential path instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fairsight::calibration::calibrate;
use fairsight::synthgen::{generate, BiasScenario};
use fairsight::HyperParams;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("1-thread", single), ("pool", all)]
}

fn bench_generate(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate");
    let scenarios = [
        ("classification", BiasScenario::classification(1, 20_000)),
        ("detection", BiasScenario::detection(1, 5_000)),
    ];
    for (label, pool) in pools() {
        for (task, scenario) in &scenarios {
            group.bench_with_input(BenchmarkId::new(*task, label), scenario, |b, s| {
                pool.install(|| b.iter(|| generate(s).unwrap()))
            });
        }
    }
    group.finish();
}

fn bench_calibrate(c: &mut Criterion) {
    let mut group = c.benchmark_group("calibrate");
    group.sample_size(20);
    let params = HyperParams::default();
    let cls = generate(&BiasScenario::classification(2, 20_000)).unwrap();
    let det = generate(&BiasScenario::detection(2, 2_000)).unwrap();
    for (label, pool) in pools() {
        for (task, data) in [("classification", &cls), ("detection", &det)] {
            group.bench_with_input(BenchmarkId::new(task, label), data, |b, d| {
                pool.install(|| b.iter(|| calibrate(d, &params).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench_generate, bench_calibrate);
criterion_main!(benches);
