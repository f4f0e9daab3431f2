use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use sdc_core::data::presets::Preset;
use sdc_core::data::{make_dataset, make_dataset_with, Split};
use sdc_core::experiment::{self, Architecture, SweepPlan, Variant};
use sdc_core::fcam::FcamModel;
use sdc_core::metrics;
use sdc_core::par::{available_workers, Execution};
use sdc_core::training::TrainConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const POLICIES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn dataset_generation(c: &mut Criterion) {
    let config = Preset::SynthAppendixD.config();
    let mut group = c.benchmark_group("generate_6000");
    for (name, exec) in POLICIES {
        group.bench_function(name, |b| {
            b.iter(|| make_dataset_with(black_box(&config), 6000, 0.5, 0, exec).unwrap())
        });
    }
    group.finish();
}

fn batch_evaluation(c: &mut Criterion) {
    let ds = make_dataset(&Preset::SynthAppendixD.config(), 6000, 0.5, 0).unwrap();
    let fcam = Architecture::Mlp.fcam_config("SM-2".parse().unwrap(), ds.dims()).unwrap();
    let model = FcamModel::new(fcam, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let view = ds.eval_view(Split::Test);
    let mut group = c.benchmark_group("evaluate_3000");
    for (name, exec) in POLICIES {
        group.bench_function(name, |b| b.iter(|| metrics::evaluate(&model, black_box(&view), exec).unwrap()));
    }
    group.finish();
}

fn small_sweep(c: &mut Criterion) {
    let ds = make_dataset(&Preset::ErrorMode1.config(), 200, 0.0, 0).unwrap();
    let variants = Variant::parse_list("SM-0,SpMax-0,HA-0").unwrap();
    let mut group = c.benchmark_group("sweep_em1_3x4");
    group.sample_size(10);
    for workers in [1, available_workers().max(2)] {
        let plan = SweepPlan {
            variants: variants.clone(),
            seeds: vec![0, 1, 2, 3],
            architecture: Architecture::Linear,
            train: TrainConfig {
                epochs: 50,
                batch_size: None,
                learning_rate: 0.003,
                log_every: 50,
                ..TrainConfig::default()
            },
            workers,
        };
        group.bench_with_input(BenchmarkId::new("workers", workers), &plan, |b, plan| {
            b.iter(|| experiment::sweep(&ds, plan, |_| Ok(())).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, dataset_generation, batch_evaluation, small_sweep);
criterion_main!(benches);
