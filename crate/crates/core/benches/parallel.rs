// One-worker pool against all cores on the three data-parallel hot paths.
// Build with --no-default-features to get the sequential fallback, where
// both variants run the same code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use stance_core::cluster::cosine_distances;
use stance_core::compose::{prepare_sample, window_stage, PreparedSample};
use stance_core::graph::{co_retweet_graph, EdgeWeighting, GraphLevel};
use stance_core::ingest::{SampleSpec, DEFAULT_WINDOW_LEN};
use stance_core::matrix::DEFAULT_INFLUENCER_FRACTION;
use stance_core::parallel::with_threads;
use stance_core::pca::{Provenance, ScoreMatrix};
use stance_core::synth::{generate, PlantedConfig};

fn sample() -> PreparedSample {
    let out = generate(&PlantedConfig::two_stance(11, 3000)).unwrap();
    let (sid, events) = &out.events[0];
    let t = &out.truth.samples[0];
    let spec = SampleSpec::new(sid.clone(), t.start, t.end).unwrap();
    prepare_sample(
        events,
        &spec,
        DEFAULT_INFLUENCER_FRACTION,
        DEFAULT_WINDOW_LEN,
        DEFAULT_WINDOW_LEN,
    )
    .unwrap()
}

fn scores(n: usize) -> ScoreMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = DMatrix::from_fn(n, 8, |_, _| StandardNormal.sample(&mut rng));
    let ids = (0..n).map(|i| format!("u{i}")).collect();
    let labels = (1..=8).map(|k| format!("common/PC{k}")).collect();
    ScoreMatrix::new(ids, m, Provenance::Common, labels).unwrap()
}

fn pools() -> Vec<(&'static str, usize)> {
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![("1 thread", 1), ("all cores", all)]
}

fn window_fits(c: &mut Criterion) {
    let s = sample();
    let mut group = c.benchmark_group("window_fits");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| with_threads(t, || window_stage(&s.windows, 10, 1).unwrap()).unwrap())
        });
    }
    group.finish();
}

fn cosine(c: &mut Criterion) {
    let s = scores(3000);
    let mut group = c.benchmark_group("cosine_distances");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| with_threads(t, || cosine_distances(&s, false).unwrap()).unwrap())
        });
    }
    group.finish();
}

fn gram(c: &mut Criterion) {
    let s = sample();
    let members = s.matrix.row_ids().to_vec();
    let mut group = c.benchmark_group("co_retweet_gram");
    group.sample_size(10);
    for (name, threads) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &threads, |b, &t| {
            b.iter(|| {
                with_threads(t, || {
                    co_retweet_graph(&s.matrix, &members, GraphLevel::User, None, EdgeWeighting::Binary).unwrap()
                })
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, window_fits, cosine, gram);
criterion_main!(benches);
