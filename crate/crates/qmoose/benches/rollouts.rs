//! Sequential vs data-parallel execution on the three batch hot paths.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qmoose::dynamics::{train_ensemble, NetTrainConfig};
use qmoose::harness::{binned_evaluation, BinsConfig, EpisodeConfig, Timing};
use qmoose::policy::{init_policy, PolicyConfig, VqcPolicy};
use qmoose::trainer::{loss_and_grad, TrainConfig};
use qmoose::world::{
    clean_dataset, generate_dataset, sample_initial_states, BehaviorSpec, WorldConfig,
};
use qmoose::Execution;

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn batch_rollouts(c: &mut Criterion) {
    let world = WorldConfig::default();
    let data = clean_dataset(
        &generate_dataset(&world, &BehaviorSpec::default(), 20, 1, Execution::Parallel).unwrap(),
        &world,
    );
    let net = NetTrainConfig {
        epochs: 2,
        ..NetTrainConfig::default()
    };
    let ensemble = train_ensemble(&data, 4, &net, 1, Execution::Parallel)
        .unwrap()
        .ensemble;
    let pcfg = PolicyConfig::default();
    let policy = VqcPolicy::new(pcfg.clone(), init_policy(&pcfg, 0)).unwrap();
    let starts = sample_initial_states(&data, 64, 0).unwrap();
    let cfg = TrainConfig {
        horizon: 20,
        ensemble_batch: 16,
        ..TrainConfig::default()
    };

    let mut group = c.benchmark_group("loss_and_grad_h20_b16");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                loss_and_grad(&policy, &ensemble, &starts, &cfg, &world, &mut rng, exec).unwrap()
            })
        });
    }
    group.finish();

    let bins = BinsConfig {
        runs_per_bin: 4,
        episode: EpisodeConfig {
            max_steps: 100,
            timing: Timing::Modeled { compute_ms: 0.0 },
            ..EpisodeConfig::default()
        },
        ..BinsConfig::default()
    };
    let mut group = c.benchmark_group("binned_evaluation_6x4");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| binned_evaluation(&policy, &world, &bins, 0, exec).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("generate_dataset_20ep");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset(&world, &BehaviorSpec::default(), 20, 2, exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, batch_rollouts);
criterion_main!(benches);
