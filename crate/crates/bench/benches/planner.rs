use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use embedscale::contrastive::{contrastive_loss, ContrastiveConfig, EmbeddingBatch};
use embedscale::recipe::{plan, PlannerArtifacts};
use embedscale::scalinglaw::{fit, InitGrid};
use embedscale::synth::{generate, SynthGrid, SynthSpec};
use embedscale::{count_params, flop_cost, param_counts, Budget, ChinchillaParams, FineTuneMethod, FitConfig, FittedParams, Formula, Registry};

fn cost_model(c: &mut Criterion) {
    let reg = Registry::bundled();
    let arch = reg.require("pythia-1.4b").unwrap().clone();
    c.bench_function("count_params/pythia-1.4b", |b| b.iter(|| count_params(black_box(&arch)).unwrap()));
    for method in ["full", "freeze:12", "lora:128", "bias"] {
        let m: FineTuneMethod = method.parse().unwrap();
        c.bench_with_input(BenchmarkId::new("flop_cost", method), &m, |b, m| {
            b.iter(|| flop_cost(&param_counts(&arch, m).unwrap(), black_box(1e9)).unwrap())
        });
    }
    let art = PlannerArtifacts::defaults();
    c.bench_function("plan/default", |b| b.iter(|| plan(Budget::new(black_box(3e17)).unwrap(), &art).unwrap()));
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> EmbeddingBatch {
    let mut v = || (0..n).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<Vec<f64>>>();
    let q = v();
    let p = v();
    EmbeddingBatch::new(q, p).unwrap()
}

fn contrastive(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = ContrastiveConfig::default();
    for n in [16, 128, 1024] {
        let batch = random_batch(&mut rng, n, 64);
        c.bench_with_input(BenchmarkId::new("contrastive_loss", n), &batch, |b, batch| {
            b.iter(|| contrastive_loss(black_box(batch), &cfg).unwrap())
        });
    }
}

fn fitting(c: &mut Criterion) {
    let spec = SynthSpec {
        truth: FittedParams::Chinchilla(ChinchillaParams {
            irreducible_loss: 0.3,
            a: 200.0,
            b: 200.0,
            alpha: 0.3,
            beta: 0.3,
        }),
        method_truth: Default::default(),
        grid: SynthGrid::default(),
        noise_sigma: 0.01,
        seed: 3,
    };
    let runs = generate(&spec, &Registry::bundled()).unwrap().runs;
    let cfg = FitConfig {
        init_grid: InitGrid {
            alpha: vec![0.3],
            beta: vec![0.3],
            irreducible_fraction: vec![0.5],
            scale: vec![1.0],
        },
        ..FitConfig::default()
    };
    let mut group = c.benchmark_group("fit");
    group.sample_size(20);
    group.bench_function("chinchilla/single-start", |b| b.iter(|| fit(black_box(&runs), Formula::Chinchilla, &cfg).unwrap()));
    group.finish();
}

criterion_group!(benches, cost_model, contrastive, fitting);
criterion_main!(benches);
