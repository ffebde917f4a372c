use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use incparse::beam::{decode, BeamConfig};
use incparse::embedding::PlantedProvider;
use incparse::probes::{sequence_nll, MapConfig, MapProbe, NapConfig, NapProbe, Probe, StepFilter};
use incparse::structural::{mst_decode, Projection};
use incparse::synth::{generate, SynthConfig};
use incparse::transition::oracle;
use incparse::{EmbeddingMatrix, EmbeddingProvider, Sentence};

const DIM: usize = 256;

fn sentences(n_words: usize) -> Vec<Sentence> {
    let config = SynthConfig {
        sentences: 16,
        min_words: n_words,
        max_words: n_words + 4,
        seed: 5,
    };
    generate("bench", &config).unwrap()
}

fn embed(sentences: &[Sentence]) -> Vec<EmbeddingMatrix> {
    let mut provider = PlantedProvider::new(DIM, 3).unwrap();
    for s in sentences {
        provider.register(&s.id, s.tree.clone());
    }
    sentences.iter().map(|s| provider.hidden_states(&s.id, &s.words, 0).unwrap()).collect()
}

fn bench_oracle(c: &mut Criterion) {
    let mut group = c.benchmark_group("oracle");
    for n in [8, 24] {
        let batch = sentences(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &batch, |b, batch| {
            b.iter(|| batch.iter().map(|s| oracle(black_box(&s.tree)).unwrap().len()).sum::<usize>())
        });
    }
    group.finish();
}

fn bench_scoring(c: &mut Criterion) {
    let batch = sentences(12);
    let embs = embed(&batch);
    let gold: Vec<_> = batch.iter().map(|s| oracle(&s.tree).unwrap()).collect();
    let map = MapProbe::new(DIM, &MapConfig::default());
    let nap = NapProbe::new(DIM, &NapConfig::default());
    let mut group = c.benchmark_group("score");
    for (name, probe) in [("map", &map as &dyn Probe), ("nap", &nap as &dyn Probe)] {
        group.bench_function(name, |b| {
            b.iter(|| {
                let mut total = 0.0;
                for ((s, emb), actions) in batch.iter().zip(&embs).zip(&gold) {
                    total += sequence_nll(probe, emb, s.words.len(), actions.actions(), StepFilter::All).unwrap().value;
                }
                total
            })
        });
    }
    group.finish();
}

fn bench_beam(c: &mut Criterion) {
    let batch = sentences(10);
    let embs = embed(&batch);
    let probe = MapProbe::new(DIM, &MapConfig::default());
    let mut group = c.benchmark_group("beam");
    group.sample_size(20);
    for k in [1, 10] {
        let config = BeamConfig { k_action: k, k_word: k, k_out: k };
        group.bench_with_input(BenchmarkId::from_parameter(k), &config, |b, &config| {
            b.iter(|| embs.iter().map(|e| decode(&probe, e, config).unwrap().len()).sum::<usize>())
        });
    }
    group.finish();
}

fn bench_mst(c: &mut Criterion) {
    let batch = sentences(30);
    let embs = embed(&batch);
    let projection = Projection::random(64, DIM, 0.1, 1).unwrap();
    let pairwise: Vec<_> = embs.iter().map(|e| projection.pairwise(e.vectors()).unwrap()).collect();
    c.bench_function("mst", |b| {
        b.iter(|| pairwise.iter().map(|d| mst_decode(black_box(d.view())).unwrap().len()).sum::<usize>())
    });
}

criterion_group!(benches, bench_oracle, bench_scoring, bench_beam, bench_mst);
criterion_main!(benches);
