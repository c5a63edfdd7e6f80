use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use logkv::harness::{load_traces, run_on_traces, SyntheticSource};
use logkv::{Execution, ExperimentConfig, Mode, PolicyKind, SyntheticSpec};

fn sweep_config() -> ExperimentConfig {
    ExperimentConfig {
        synthetic: Some(SyntheticSource {
            count: 8,
            spec: SyntheticSpec {
                prompt_len: 192,
                decode_steps: 16,
                head_dim: 64,
                ..SyntheticSpec::default()
            },
        }),
        policies: PolicyKind::ALL.to_vec(),
        bits: vec![2, 4],
        budgets: vec![48],
        modes: vec![Mode::QuantizeRest, Mode::EvictRest],
        ..ExperimentConfig::default()
    }
}

fn bench_sweep(c: &mut Criterion) {
    let cfg = sweep_config();
    let traces = load_traces(&cfg, Execution::Sequential).expect("synthetic traces");
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    for (name, exec) in [
        ("sequential", Execution::Sequential),
        ("parallel", Execution::Parallel),
    ] {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_on_traces(&cfg, &traces, exec).expect("sweep"))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_sweep);
criterion_main!(benches);
