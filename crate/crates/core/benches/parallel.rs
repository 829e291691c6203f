use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vcq::entropy::prefix_entropies;
use vcq::generation::{sample_corpus, CountModel, CountModelConfig, GuidancePolicy, Ramp};
use vcq::quantizer::{fit_codebook, quantize_batch, FitConfig};
use vcq::{Codebook, Execution, Schedule, TokenCorpus};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn latents(n: usize, l: usize, d: usize, seed: u64) -> Vec<Array2<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Array2::from_shape_fn((l, d), |_| rng.random_range(-1.0..1.0))).collect()
}

fn random_corpus(schedule: &Schedule, n: usize, classes: u32, seed: u64) -> TokenCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = schedule.sizes();
    let rows: Vec<Vec<u32>> = (0..n).map(|_| sizes.iter().map(|&k| rng.random_range(0..k)).collect()).collect();
    let labels = (0..n as u32).map(|i| i % classes).collect();
    TokenCorpus::from_rows(&rows, schedule.k_max(), Some(labels)).unwrap()
}

fn quantize(c: &mut Criterion) {
    let schedule = Schedule::cosine(2, 256, 64).unwrap();
    let batch = latents(512, 64, 8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let codebook = Codebook::new(Array2::from_shape_fn((256, 8), |_| rng.random_range(-1.0..1.0))).unwrap();
    let mut g = c.benchmark_group("quantize_batch");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| quantize_batch(&batch, &schedule, &codebook, exec).unwrap())
        });
    }
    g.finish();
}

fn fit(c: &mut Criterion) {
    let schedule = Schedule::cosine(2, 128, 32).unwrap();
    let batch = latents(256, 32, 8, 3);
    let config = FitConfig { k_max: 128, epochs: 3, decay: 0.9, seed: 0 };
    let mut g = c.benchmark_group("fit_codebook");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| fit_codebook(&batch, &schedule, 8, &config, exec).unwrap())
        });
    }
    g.finish();
}

fn entropy(c: &mut Criterion) {
    let schedule = Schedule::cosine(2, 64, 64).unwrap();
    let corpus = random_corpus(&schedule, 4096, 1, 4);
    let mut g = c.benchmark_group("prefix_entropies");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| prefix_entropies(&corpus, exec)));
    }
    g.finish();
}

fn sampling(c: &mut Criterion) {
    let schedule = Schedule::cosine(2, 256, 64).unwrap();
    let corpus = random_corpus(&schedule, 2000, 10, 5);
    let model = CountModel::fit(&corpus, &schedule, &CountModelConfig::default()).unwrap();
    let policy = GuidancePolicy::new(2.0, Ramp::Cosine, 1.5, true, 1.0).unwrap();
    let classes: Vec<Option<u32>> = (0..200).map(|i| Some(i % 10)).collect();
    let mut g = c.benchmark_group("sample_corpus");
    g.sample_size(20);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sample_corpus(&model, &classes, &policy, 7, exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, quantize, fit, entropy, sampling);
criterion_main!(benches);
