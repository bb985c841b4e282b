//! One federated round and one evaluation pass, run sequentially and on a
//! rayon pool. Outputs are identical in both modes; only wall time differs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use fedflow::aggregate::{AggregationWeights, Strategy};
use fedflow::federation::evaluate;
use fedflow::lora::init_adapter_set;
use fedflow::scenario::{self, RunOptions, ScenarioConfig};
use fedflow::Matrix;

fn config() -> ScenarioConfig {
    let mut c = ScenarioConfig::default();
    c.federation.seed = 7;
    c
}

fn worker_counts() -> Vec<usize> {
    let n = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut counts = vec![1];
    if fedflow::exec::parallel_enabled() {
        counts.push(n.clamp(2, 8));
    }
    counts
}

fn round(c: &mut Criterion) {
    let config = config();
    let mut group = c.benchmark_group("round");
    group.sample_size(10);
    for workers in worker_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, &workers| {
            b.iter_batched(
                || scenario::prepare(&config, RunOptions { workers, record_wall_time: false }).unwrap().0,
                |mut fed| {
                    fed.run_round().unwrap();
                    black_box(fed)
                },
                BatchSize::LargeInput,
            );
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let (fed, ..) = scenario::prepare(&config(), RunOptions::default()).unwrap();
    let model = fed.global.effective().unwrap();
    let test = fed.test.clone();
    let mut group = c.benchmark_group("evaluate");
    for workers in worker_counts() {
        group.bench_with_input(BenchmarkId::from_parameter(workers), &workers, |b, &workers| {
            b.iter(|| fedflow::exec::with_workers(workers, || black_box(evaluate(&model, &test, workers > 1).unwrap())));
        });
    }
    group.finish();
}

fn aggregation(c: &mut Criterion) {
    let (fed, ..) = scenario::prepare(&config(), RunOptions::default()).unwrap();
    let model = fed.global.effective().unwrap();
    let points = model.adapt_points();
    let updates: Vec<_> = fed
        .clients
        .iter()
        .map(|cl| {
            let mut set = init_adapter_set(&points, cl.rank, cl.shard.client_id, cl.shard.client_id as u64).unwrap();
            let mut rng = fedflow::seed::rng(cl.shard.client_id as u64);
            for a in &mut set.adapters {
                a.b = Matrix::random_normal(a.b.rows(), a.rank(), 0.02, &mut rng);
            }
            set
        })
        .collect();
    let counts: Vec<usize> = fed.clients.iter().map(|cl| cl.shard.len()).collect();
    let weights = AggregationWeights::from_counts(&counts).unwrap();
    let mut group = c.benchmark_group("aggregate");
    for strategy in [Strategy::Stacking, Strategy::Reference, Strategy::ZeroPad] {
        group.bench_function(strategy.name(), |b| b.iter(|| black_box(strategy.aggregate(&updates, &weights).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, round, evaluation, aggregation);
criterion_main!(benches);
