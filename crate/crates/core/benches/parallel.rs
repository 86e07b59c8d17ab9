use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use driftmoe::data::{generate_stream, RegimeScript, Split};
use driftmoe::exec::Execution;
use driftmoe::model::{batch_gradients, Model, ModelConfig};

const SCRIPT: &str = r#"
seed = 3
variables = 3

[[segments]]
kind = "sinusoid"
length = 1500
params = { amplitude = 2.0, period = 24.0, noise_std = 0.3 }

[[segments]]
kind = "ar1"
length = 1500
params = { phi = 0.7, noise_std = 1.0 }
"#;

fn batch(c: &mut Criterion) {
    let ds = generate_stream(&RegimeScript::from_toml(SCRIPT).unwrap()).unwrap();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(20);
    for size in [32, 128] {
        for exec in [Execution::Sequential, Execution::Parallel] {
            let mut cfg = ModelConfig {
                lookback: 96,
                horizon: 24,
                n_vars: 3,
                patch_len: 16,
                stride: 8,
                ..Default::default()
            };
            cfg.train.execution = exec;
            let model = Model::new(cfg.clone()).unwrap();
            let origins: Vec<usize> = ds
                .window_origins(Split::Train, cfg.lookback, cfg.horizon)
                .unwrap()
                .take(size)
                .collect();
            group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), size), &origins, |b, o| {
                b.iter(|| batch_gradients(&model, &ds, o, None).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);
