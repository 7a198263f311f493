use cmfn_core::datagen::generate_samples;
use cmfn_core::{par, DistortionSpec, GenerateSpec, ModelConfig, RefineOptions, Trainer};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn small_config() -> ModelConfig {
    ModelConfig {
        channels: 32,
        ffn_dim: 64,
        iterations: 2,
        ..ModelConfig::default()
    }
}

fn batch_gradients(c: &mut Criterion) {
    let cfg = small_config();
    let trainer = Trainer::new(&cfg).unwrap();
    let batch = generate_samples(&GenerateSpec::new(8, DistortionSpec::irregular(), 1)).unwrap();
    let mut group = c.benchmark_group("batch_gradients");
    group.sample_size(10);
    group.bench_with_input(BenchmarkId::new("parallel", batch.len()), &batch, |b, batch| {
        b.iter(|| par::map(batch, |s| trainer.sample_gradients(s).unwrap().0))
    });
    group.bench_with_input(BenchmarkId::new("sequential", batch.len()), &batch, |b, batch| {
        b.iter(|| par::map_sequential(batch, |s| trainer.sample_gradients(s).unwrap().0))
    });
    group.finish();
}

fn batch_predict(c: &mut Criterion) {
    let cfg = small_config();
    let trainer = Trainer::new(&cfg).unwrap();
    let samples = generate_samples(&GenerateSpec::new(16, DistortionSpec::irregular(), 2)).unwrap();
    let opts = RefineOptions::default();
    let mut group = c.benchmark_group("batch_predict");
    group.sample_size(10);
    group.bench_function("parallel", |b| {
        b.iter(|| par::map(&samples, |s| trainer.model.predict(&s.image(), opts).unwrap()))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| par::map_sequential(&samples, |s| trainer.model.predict(&s.image(), opts).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, batch_gradients, batch_predict);
criterion_main!(benches);
