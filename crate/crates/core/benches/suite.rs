use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use topoman::suite::{run_suite, Execution, ExperimentSpec};

fn suite_execution(c: &mut Criterion) {
    let spec = ExperimentSpec::full_sweep(20, 4);
    let mut group = c.benchmark_group("full_sweep_n20_4seeds");
    group.sample_size(10);
    group.bench_function("sequential", |b| b.iter(|| run_suite(black_box(&spec), Execution::Sequential).unwrap()));
    group.bench_function("parallel", |b| b.iter(|| run_suite(black_box(&spec), Execution::Parallel).unwrap()));
    group.finish();
}

criterion_group!(benches, suite_execution);
criterion_main!(benches);
