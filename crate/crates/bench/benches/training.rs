use std::collections::BTreeSet;

use criterion::{criterion_group, criterion_main, Criterion};
use easynlp_bench::{headlines, zoo_model};
use easynlp_core::data_hub::{relation_surface, toy, TripleStore};
use easynlp_core::dkplm::{kb_entities, select_longtail_entities, LongTailPolicy, PretrainConfig, Pretrainer};
use easynlp_core::tokenization::{build_vocab, encode, EntityMatcher};
use easynlp_core::train::{class_probabilities, train_classifier_epoch};
use easynlp_core::{AdamConfig, AdamState, Rng};

fn classifier(c: &mut Criterion) {
    let (vocab, data) = headlines(64, 16);
    let mut group = c.benchmark_group("classifier");
    group.sample_size(10);
    for name in ["bert-tiny-uncased", "bert-small-uncased"] {
        let model = zoo_model(name, &vocab, 16, 1);
        group.bench_function(format!("train_epoch_64/{name}"), |bench| {
            bench.iter_batched(
                || (model.clone(), AdamState::new(model.params(), AdamConfig::with_lr(1e-3)), Rng::new(1)),
                |(mut m, mut adam, mut rng)| train_classifier_epoch(&mut m, &mut adam, &data, 16, &mut rng, None).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
        group.bench_function(format!("predict_64/{name}"), |bench| bench.iter(|| class_probabilities(&model, &data, 32).unwrap()));
    }
    group.finish();
}

fn dkplm_epoch(c: &mut Criterion) {
    let cfg = toy::WorldConfig { corpus_sentences: 200, ..toy::WorldConfig::default() };
    let world = toy::knowledge_world(&cfg, 3);
    let kb = TripleStore::from_triples(world.triples.clone()).unwrap();
    let mut texts = world.corpus.clone();
    texts.extend(kb.triples().iter().map(|t| format!("{} {} {}", t.head, relation_surface(&t.relation), t.tail)));
    let vocab = build_vocab(&texts, 1).unwrap();
    let names = kb_entities(&kb);
    let matcher = EntityMatcher::new(&vocab, names.iter().map(String::as_str));
    let corpus: Vec<_> = world
        .corpus
        .iter()
        .map(|t| {
            let mut s = encode(&vocab, t, 16);
            matcher.annotate(&mut s);
            s
        })
        .collect();
    let stats = easynlp_core::data_hub::entity_frequencies(&corpus, names.iter().map(String::as_str), &vocab);
    let mut group = c.benchmark_group("pretrain_epoch_200");
    group.sample_size(10);
    for inject in [false, true] {
        let longtail = if inject {
            select_longtail_entities(&stats, &kb, LongTailPolicy::default()).unwrap()
        } else {
            BTreeSet::new()
        };
        let mut mcfg = easynlp_core::model_zoo::zoo_config("bert-tiny-uncased").unwrap();
        mcfg.vocab_size = vocab.len();
        mcfg.max_position = 16;
        mcfg.num_relations = kb.num_relations();
        let model = easynlp_core::model_zoo::TransformerModel::init(&mcfg, 1).unwrap();
        let pcfg = PretrainConfig { epochs: 1, inject, ..PretrainConfig::default() };
        group.bench_function(if inject { "dkplm" } else { "mlm" }, |bench| {
            bench.iter_batched(
                || (model.clone(), Pretrainer::new(&model, &corpus, &kb, &longtail, &vocab, &pcfg).unwrap()),
                |(mut m, mut t)| t.epoch(&mut m).unwrap(),
                criterion::BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, classifier, dkplm_epoch);
criterion_main!(benches);
