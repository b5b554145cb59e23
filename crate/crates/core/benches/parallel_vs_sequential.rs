use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use rnce_lab::encoder::{EncoderConfig, RegionLayout};
use rnce_lab::evalstats::{bootstrap_metric_with, BootstrapConfig, ProbeTask};
use rnce_lab::parallel::ExecMode;
use rnce_lab::synthgen::{generate_cohort, CohortConfig};
use rnce_lab::trainer::{train_patch_models, Level, Method, TrainConfig};

const MODES: [(&str, ExecMode); 2] = [("sequential", ExecMode::Sequential), ("parallel", ExecMode::Parallel)];

fn patch_training(c: &mut Criterion) {
    let (cohort, _) = generate_cohort(&CohortConfig {
        n_subjects: 400,
        layout: RegionLayout::standard(12),
        representation_dim: 16,
        ..Default::default()
    })
    .unwrap();
    let enc = EncoderConfig {
        hidden_layers: 1,
        hidden_width: 32,
        embed_dim: 16,
        mlp_width: 16,
        ..Default::default()
    };
    let cfg = TrainConfig {
        steps: 5,
        batch_size: 32,
        ..TrainConfig::defaults(Method::Rnce, Level::Patch)
    };
    let mut group = c.benchmark_group("patch_training");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| train_patch_models(&cohort.pretrain, cohort.layout(), &enc, &cfg, mode).unwrap())
        });
    }
    group.finish();
}

fn bootstrap(c: &mut Criterion) {
    let (cohort, _) = generate_cohort(&CohortConfig {
        n_subjects: 1000,
        ..Default::default()
    })
    .unwrap();
    let task = ProbeTask::Amyloid;
    let (idx, labels) = task.select(&cohort.pretrain.subjects);
    let x = cohort.pretrain.aux.select_rows(&idx);
    let cfg = BootstrapConfig {
        n_boot: 50,
        ..Default::default()
    };
    let mut group = c.benchmark_group("bootstrap");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| bootstrap_metric_with("aux", task, &x, &labels, &cfg, mode).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, patch_training, bootstrap);
criterion_main!(benches);
