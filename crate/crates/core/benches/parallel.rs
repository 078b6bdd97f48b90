//! Data-parallel hot paths against the single-thread fallback.
//!
//! `par::sequential` runs the same code on one worker, so each pair differs
//! only in scheduling. Build with `--no-default-features` to measure the
//! rayon-free path.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use tagforge::corpus::{split, Vocab};
use tagforge::crf::{self, nll_and_gradient, CrfTrainConfig, CrfTrainData};
use tagforge::eval::{flat_f1, Averaging};
use tagforge::par;
use tagforge::synth::synthetic_corpus;
use tagforge::taggers::{train_tagger, TrainConfig, TransformerConfig, TransformerTagger};

fn crf_gradient(c: &mut Criterion) {
    let data = CrfTrainData::from_corpus(&synthetic_corpus(2000, 1));
    let cfg = CrfTrainConfig {
        epochs: 1,
        ..CrfTrainConfig::default()
    };
    let (model, _) = crf::train(&data, &cfg, |_, _| {}).unwrap();
    let encoded: Vec<_> = data
        .x
        .iter()
        .zip(&data.y)
        .map(|(x, y)| model.encode(x, &y.iter().map(String::as_str).collect::<Vec<_>>()).unwrap())
        .collect();
    let mut g = c.benchmark_group("crf_nll_and_gradient");
    g.bench_function(BenchmarkId::new("parallel", 2000), |b| {
        b.iter(|| black_box(nll_and_gradient(&encoded, &model, 0.1)))
    });
    g.bench_function(BenchmarkId::new("sequential", 2000), |b| {
        b.iter(|| par::sequential(|| black_box(nll_and_gradient(&encoded, &model, 0.1))))
    });
    g.finish();
}

fn flat_metric(c: &mut Criterion) {
    let corpus = synthetic_corpus(20_000, 2);
    let truth: Vec<Vec<&str>> = corpus.iter().map(|s| s.tags()).collect();
    let mut g = c.benchmark_group("flat_f1");
    g.bench_function("parallel", |b| {
        b.iter(|| black_box(flat_f1(&truth, &truth, Averaging::Weighted, true)))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| par::sequential(|| black_box(flat_f1(&truth, &truth, Averaging::Weighted, true))))
    });
    g.finish();
}

fn transformer_epoch(c: &mut Criterion) {
    let corpus = synthetic_corpus(256, 3);
    let vocab = Vocab::build(&corpus, 1);
    let (train, valid) = split(&corpus, 0.8, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::transformer()
    };
    let fresh = || TransformerTagger::new(TransformerConfig::default(), vocab.clone(), None, 0).unwrap();
    let mut g = c.benchmark_group("transformer_epoch");
    g.sample_size(10);
    g.bench_function("parallel", |b| {
        b.iter(|| black_box(train_tagger(&mut fresh(), &train, &valid, &cfg, |_, _| {}).unwrap()))
    });
    g.bench_function("sequential", |b| {
        b.iter(|| par::sequential(|| black_box(train_tagger(&mut fresh(), &train, &valid, &cfg, |_, _| {}).unwrap())))
    });
    g.finish();
}

criterion_group!(benches, crf_gradient, flat_metric, transformer_epoch);
criterion_main!(benches);
