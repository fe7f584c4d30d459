use std::sync::Arc;

use cicd::engine::EngineConfig;
use cicd::exec::{self, Execution};
use cicd::experiment::{run_experiment, ContrastSource};
use cicd::logits::{js_divergence, softmax, LogitVector};
use cicd::selector::{build_store, select_retrieved};
use cicd::sim::world::{build_world, WorldConfig};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [Execution; 2] = [Execution::Sequential, Execution::Parallel];

fn experiment(c: &mut Criterion) {
    let world = Arc::new(build_world(&WorldConfig { n_images: 64, ..WorldConfig::default() }, 0).unwrap());
    let mut g = c.benchmark_group("experiment");
    g.sample_size(10);
    for mode in MODES {
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| {
                run_experiment(&world, &EngineConfig::default(), vec![0, 1], None, ContrastSource::Random, Vec::new(), mode)
                    .unwrap()
            })
        });
    }
    g.finish();
}

fn batch_jsd(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut vec = |n: usize| LogitVector::new((0..n).map(|_| rng.random_range(-10.0..10.0)).collect()).unwrap();
    let pairs: Vec<_> = (0..256).map(|_| (vec(32_000), vec(32_000))).collect();
    let mut g = c.benchmark_group("batch_jsd");
    for mode in MODES {
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| {
                exec::map(mode, &pairs, |(p, q)| {
                    js_divergence(&softmax(p).unwrap(), &softmax(q).unwrap()).unwrap().jsd
                })
            })
        });
    }
    g.finish();
}

fn retrieval(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let records: Vec<(String, Vec<f64>)> = (0..50_000)
        .map(|i| (format!("img{i:05}"), (0..256).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let query = records[0].1.clone();
    let store = build_store(records).unwrap();
    let mut g = c.benchmark_group("retrieval");
    for mode in MODES {
        g.bench_function(BenchmarkId::from_parameter(format!("{mode:?}")), |b| {
            b.iter(|| select_retrieved(&store, "img00000", &query, mode).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, experiment, batch_jsd, retrieval);
criterion_main!(benches);
