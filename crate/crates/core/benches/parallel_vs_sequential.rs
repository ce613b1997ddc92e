use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use mvstop::model::ProblemSpec;
use mvstop::parallel::Execution;
use mvstop::simulate::{estimate_regularized, Intensity, MCConfig};

fn mc_regularized(c: &mut Criterion) {
    let spec = ProblemSpec::gbm(0.05, 0.5, 1.0, 0.1, 1.0);
    let intensity = Intensity::Constant(0.8);
    let mut group = c.benchmark_group("mc_regularized");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let mc = MCConfig::new(4000, 1e-2, 7).with_execution(exec);
        group.bench_with_input(BenchmarkId::from_parameter(format!("{exec:?}")), &mc, |b, mc| {
            b.iter(|| estimate_regularized(&spec, &intensity, 0.0, black_box(0.3), mc).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, mc_regularized);
criterion_main!(benches);
