//! Fixtures shared by the benchmark targets.

use easynlp_core::data_hub::{encode_records, record_texts, toy, EncodedDataset, InputSpec, LabelMap, Task};
use easynlp_core::model_zoo::{zoo_config, TransformerModel};
use easynlp_core::tokenization::{build_vocab, Vocabulary};
use easynlp_core::{Rng, Tensor};

pub fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.next_f64() * 2.0 - 1.0).collect()).expect("finite")
}

/// A zoo model sized to `vocab` with a short position table.
pub fn zoo_model(name: &str, vocab: &Vocabulary, max_position: usize, seed: u64) -> TransformerModel {
    let mut cfg = zoo_config(name).expect("zoo name");
    cfg.vocab_size = vocab.len();
    cfg.max_position = max_position;
    TransformerModel::init(&cfg, seed).expect("valid config")
}

/// `n` encoded two-topic headlines plus their vocabulary.
pub fn headlines(n: usize, max_len: usize) -> (Vocabulary, EncodedDataset) {
    let records = toy::toy_tnews(n, 7);
    let vocab = build_vocab(&record_texts(&records, &["sent"]), 1).expect("non-empty corpus");
    let spec = InputSpec {
        task: Task::TextClassify,
        first_sequence: "sent".into(),
        second_sequence: None,
        label_name: Some("label".into()),
        max_len,
    };
    let labels = LabelMap::new(["0", "1"]).expect("two labels");
    let data = encode_records(&records, &toy::tnews_schema(), &vocab, &spec, Some(&labels)).expect("toy schema");
    (vocab, data)
}
