//! Data-parallel hot paths, benched on a single-thread rayon pool against the
//! default pool. The work is identical either way (keyed rng streams plus
//! fixed-order reductions), so this measures pure scheduling gain.
//!
//! Build without default features to bench the sequential fallback itself;
//! criterion's saved baselines then give the cross-build comparison.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use emotok::corpus::{build_pref_corpus, build_sft_corpus, CorpusConfig};
use emotok::eval::evaluate;
use emotok::model::grad::{gradients, LossBatch, LossFn, PairBatch};
use emotok::model::net::SamplePolicy;
use emotok::model::{ModelConfig, ModelParams};
use emotok::objectives::LossConfig;
use emotok::rng::Stream;

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    let all = rayon::ThreadPoolBuilder::new()
        .build()
        .expect("default pool");
    vec![("1-thread", single), ("all-threads", all)]
}

fn bench_corpus_synthesis(c: &mut Criterion) {
    let cfg = CorpusConfig {
        per_emotion: 200,
        seed: 3,
        ..CorpusConfig::default()
    };
    let mut group = c.benchmark_group("corpus_synthesis_1000");
    group.sample_size(20);
    group.warm_up_time(Duration::from_millis(500));
    group.measurement_time(Duration::from_secs(3));
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| pool.install(|| build_sft_corpus(cfg).unwrap()))
        });
    }
    group.finish();
}

fn bench_pair_gradients(c: &mut Criterion) {
    let corpus = build_sft_corpus(&CorpusConfig {
        per_emotion: 4,
        seed: 5,
        ..CorpusConfig::default()
    })
    .unwrap();
    let params = ModelParams::init(
        ModelConfig::default(),
        &mut Stream::derive(5, "init", 0),
    )
    .unwrap();
    let pref = build_pref_corpus(&corpus).unwrap();
    let pairs: Vec<_> = pref.pairs.iter().take(8).collect();
    let batch = PairBatch::from_pairs(&params.vocabulary(), &pairs, &params).unwrap();
    let loss = LossFn::Total(LossConfig::default());

    let mut group = c.benchmark_group("pair_gradients_batch8");
    group.sample_size(20);
    group.warm_up_time(Duration::from_millis(500));
    group.measurement_time(Duration::from_secs(4));
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                pool.install(|| gradients(&params, &loss, &LossBatch::Pairs(&batch)).unwrap())
            })
        });
    }
    group.finish();
}

fn bench_evaluation(c: &mut Criterion) {
    let corpus = build_sft_corpus(&CorpusConfig {
        per_emotion: 10,
        seed: 7,
        ..CorpusConfig::default()
    })
    .unwrap();
    let params = ModelParams::init(
        ModelConfig::default(),
        &mut Stream::derive(7, "init", 0),
    )
    .unwrap();

    let mut group = c.benchmark_group("evaluate_50_items");
    group.sample_size(10);
    group.warm_up_time(Duration::from_millis(500));
    group.measurement_time(Duration::from_secs(4));
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                pool.install(|| {
                    evaluate(
                        &params,
                        &corpus.utterances,
                        &SamplePolicy::Greedy,
                        0,
                    )
                    .unwrap()
                })
            })
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_corpus_synthesis,
    bench_pair_gradients,
    bench_evaluation
);
criterion_main!(benches);
