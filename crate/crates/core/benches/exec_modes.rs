use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use wordcon_core::flowmodel::ModelConfig;
use wordcon_core::glyphforge::{build_dataset, DatasetConfig, MANIFEST_FILE};
use wordcon_core::trainer::{
    base_model, initial_state, train_step, validation_cfm, StepContext, TrainConfig, TrainingData,
};
use wordcon_core::ExecMode;

fn exec_modes(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let dataset = DatasetConfig {
        num_samples: 48,
        ..DatasetConfig::default()
    };
    build_dataset(&dataset, dir.path(), ExecMode::Parallel).unwrap();
    let config = TrainConfig {
        manifest: dir.path().join(MANIFEST_FILE),
        out_dir: dir.path().join("run"),
        model: ModelConfig::default(),
        batch_size: 8,
        val_samples: 16,
        ..TrainConfig::default()
    };
    let (model, base) = base_model(&config).unwrap();
    let data = TrainingData::load(&config, &model).unwrap();

    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for exec in [ExecMode::Sequential, ExecMode::Parallel] {
        let cfg = TrainConfig {
            exec,
            ..config.clone()
        };
        let ctx = StepContext {
            model: &model,
            base: &base,
            config: &cfg,
            examples: &data.train,
        };
        let mut state = initial_state(&cfg, &model, &base, None).unwrap();
        group.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |b| {
            b.iter(|| train_step(&ctx, &mut state).unwrap())
        });
    }
    group.finish();

    let adapters = initial_state(&config, &model, &base, None)
        .unwrap()
        .adapters()
        .unwrap();
    let mut group = c.benchmark_group("validation_cfm");
    group.sample_size(10);
    for exec in [ExecMode::Sequential, ExecMode::Parallel] {
        group.bench_function(BenchmarkId::from_parameter(format!("{exec:?}")), |b| {
            b.iter(|| {
                validation_cfm(&model, &base, Some(&adapters), &data.val, 2, 0, exec).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, exec_modes);
criterion_main!(benches);
