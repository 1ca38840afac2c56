use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use actpred::corpus::build_vocabulary;
use actpred::embedding::build_cooccurrence;
use actpred::evaluation::{cross_validate, Pipeline};
use actpred::network::{batch_gradient, Example, Model, TrainConfig};
use actpred::procdata::{generate_synthetic, Dataset, Phase, SyntheticConfig};
use actpred::Exec;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn dataset(n: usize) -> Dataset {
    let cfg = SyntheticConfig {
        name: "bench".into(),
        phases: vec![Phase { pool: 20, dwell: 1.0 }, Phase { pool: 20, dwell: 1.0 }],
        n_interventions: n,
        mean_length: 80.0,
        length_spread: 10.0,
        seed: 5,
        ..Default::default()
    };
    generate_synthetic(&cfg).unwrap().0
}

fn config() -> TrainConfig {
    TrainConfig { embed_dim: 32, hidden: 64, window_n: 10, pad_to: 6, batch_size: 256, epochs: 2, ..Default::default() }
}

fn gradient(c: &mut Criterion) {
    let ds = dataset(8);
    let model = Model::for_dataset(&ds, config()).unwrap();
    let examples: Vec<Example> = model
        .examples(&ds)
        .into_iter()
        .filter_map(|(tokens, t)| Some(Example { tokens, target: t? }))
        .take(256)
        .collect();
    let batch: Vec<&Example> = examples.iter().collect();
    let mut g = c.benchmark_group("batch_gradient");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| batch_gradient(&model, &batch, None, exec)));
    }
    g.finish();
}

fn cooccurrence(c: &mut Criterion) {
    let corpus = dataset(200).token_corpus();
    let vocab = build_vocabulary(&corpus, 1).unwrap();
    let mut g = c.benchmark_group("cooccurrence");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| build_cooccurrence(&corpus, &vocab, 5, true, exec).unwrap())
        });
    }
    g.finish();
}

fn cross_validation(c: &mut Criterion) {
    let ds = dataset(6);
    let mut cfg = config();
    cfg.hidden = 16;
    cfg.embed_dim = 8;
    cfg.window_n = 3;
    let mut p = Pipeline::new("bench", cfg);
    p.runs = 1;
    let mut g = c.benchmark_group("cross_validate");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| cross_validate(&ds, &p, 3, 1, exec).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, gradient, cooccurrence, cross_validation);
criterion_main!(benches);
