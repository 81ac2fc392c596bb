use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use lapt::encoder::{Encoder, EncoderConfig};
use lapt::mlm::{batch_gradients, build_instances, PretrainConfig};
use lapt::par::Parallelism;
use lapt::parser::{label_inventory, Parser, ParserConfig};
use lapt::synthetic::{build_world, WorldConfig};
use lapt::treebank::score;
use lapt::wordpiece::train_vocabulary;

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)];

fn setup() -> (lapt::synthetic::World, lapt::wordpiece::Vocabulary, Encoder) {
    let world = build_world(&WorldConfig {
        base_sentences: 200,
        target_sentences: 400,
        treebank_sentences: 64,
        control_sentences: 10,
        ..WorldConfig::default()
    })
    .expect("world");
    let vocab = train_vocabulary(&world.target_corpus, 400).expect("vocab");
    let cfg = EncoderConfig {
        n_layers: 2,
        hidden: 32,
        n_heads: 2,
        ff_dim: 64,
        vocab_size: vocab.len(),
        max_positions: 64,
        dropout: 0.1,
    };
    let enc = Encoder::new(cfg, vocab.content_hash(), 1).expect("encoder");
    (world, vocab, enc)
}

fn benches(c: &mut Criterion) {
    let (world, vocab, enc) = setup();
    let pc = PretrainConfig::default();

    let mut group = c.benchmark_group("build_instances");
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| build_instances(&world.target_corpus, &vocab, &pc, 3, mode).unwrap())
        });
    }
    group.finish();

    let (inst, _) = build_instances(&world.target_corpus[..32], &vocab, &pc, 3, Parallelism::Sequential).unwrap();
    let batch: Vec<_> = inst.iter().take(32).collect();
    let mut group = c.benchmark_group("mlm_batch_gradients");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| batch_gradients(&enc, &batch, Some(5), mode).unwrap())
        });
    }
    group.finish();

    let treebank = &world.target_treebank;
    let pcfg = ParserConfig {
        bilstm_layers: 1,
        bilstm_hidden: 32,
        arc_dim: 32,
        label_dim: 16,
        ..ParserConfig::default()
    };
    let parser = Parser::new(&enc, &vocab, label_inventory(treebank), pcfg, 2).unwrap();
    let mut group = c.benchmark_group("parser_prepare_and_predict");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                let pred = parser.predict(treebank, mode).unwrap();
                score(&pred, treebank, mode).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(parallel, benches);
criterion_main!(parallel);
