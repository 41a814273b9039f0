//! Compares the rayon-backed data-parallel paths against their sequential
//! counterparts on the two hottest inner loops: per-query gallery ranking
//! and the trade-off-bound rejection-sampling trials.
//!
//! Build with the default `parallel` feature for the comparison to be
//! meaningful; without it both sides run sequentially.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bt2_core::analysis::lemma1_trial;
use bt2_core::par;
use bt2_core::retrieval::{rank_gallery, EmbeddingRecord, Gallery};

fn random_records(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| EmbeddingRecord {
            id: i as u64,
            label: (i % 10) as u32,
            vector: (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            model_tag: "bench".into(),
        })
        .collect()
}

fn bench_gallery_ranking(c: &mut Criterion) {
    let mut group = c.benchmark_group("rank_queries");
    for &n in &[200usize, 600] {
        let records = random_records(n, 32, 1);
        let queries = random_records(n, 32, 2);
        let gallery = Gallery::new(records).unwrap();
        group.bench_with_input(BenchmarkId::new("parallel", n), &n, |b, _| {
            b.iter(|| par::map_ordered(&queries, |q| rank_gallery(q, &gallery).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &n, |b, _| {
            b.iter(|| par::map_ordered_seq(&queries, |q| rank_gallery(q, &gallery).unwrap()))
        });
    }
    group.finish();
}

fn bench_lemma1_trials(c: &mut Criterion) {
    let mut group = c.benchmark_group("lemma1_trials");
    let trials = 20_000usize;
    group.bench_function("parallel", |b| {
        b.iter(|| par::map_indices(trials, |i| lemma1_trial(0.1, 7, i as u64)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| par::map_indices_seq(trials, |i| lemma1_trial(0.1, 7, i as u64)))
    });
    group.finish();
}

criterion_group!(benches, bench_gallery_ranking, bench_lemma1_trials);
criterion_main!(benches);
