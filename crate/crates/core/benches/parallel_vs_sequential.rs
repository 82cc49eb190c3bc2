//! Rayon path against the sequential fallback on the three hot loops:
//! a training step (conv im2col and scatter), dataset generation and the
//! triage grid search.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackvet::datagen::{generate, GenConfig};
use stackvet::models::{build_model, ModelId, ModelSpec};
use stackvet::par;
use stackvet::training::{step_rng, TrainConfig, Trainer};
use stackvet::triage::grid_search;
use stackvet::Tensor;

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn train_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("train_step_cnn3_cbam_b32");
    g.sample_size(10);
    let spec = ModelSpec::new(ModelId::Cnn3, 9, true);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::from_fn(&[32, 9, 20, 20], |_| r.random_range(-1.0f32..1.0));
    let y: Vec<f32> = (0..32).map(|i| (i % 2) as f32).collect();
    for (name, on) in MODES {
        par::set_parallel(on);
        let mut t = Trainer::new(build_model(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap(), TrainConfig::default());
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| t.step(x.clone(), &y, 1e-3, &mut step_rng(0, 0, 0)).unwrap())
        });
    }
    par::set_parallel(true);
    g.finish();
}

fn generation(c: &mut Criterion) {
    let mut g = c.benchmark_group("generate_64_samples");
    g.sample_size(10);
    let cfg = GenConfig {
        samples: 64,
        ..GenConfig::default()
    };
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| generate(&cfg, 7).unwrap()));
    }
    par::set_parallel(true);
    g.finish();
}

fn triage_grid(c: &mut Criterion) {
    let mut g = c.benchmark_group("triage_grid_10k_step_0.01");
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let labels: Vec<u8> = (0..10_000).map(|_| u8::from(r.random_bool(0.75))).collect();
    let scores: Vec<f64> = labels
        .iter()
        .map(|&l| (r.random::<f64>() * 0.6 + 0.4 * l as f64).min(1.0))
        .collect();
    for (name, on) in MODES {
        par::set_parallel(on);
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| grid_search(&scores, &labels, 0.01).unwrap())
        });
    }
    par::set_parallel(true);
    g.finish();
}

criterion_group!(benches, train_step, generation, triage_grid);
criterion_main!(benches);
