//! Training-loop building blocks shared by the application pipelines.

use crate::autograd::{adam_step, AdamState, Gradients, ParamStore, Tape, Tensor, Var};
use crate::data_hub::EncodedDataset;
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::model_zoo::{EmbeddingOverride, EncoderInput, Mode, TransformerModel};
use crate::rng::Rng;
use crate::tokenization::{apply_mlm_masking_with, Batch, MlmScheme, TokenSequence, IGNORE_INDEX};

/// Row indices `0..n` in shuffled mini-batches.
pub fn shuffled_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Row indices `0..n` in order.
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let order: Vec<usize> = (0..n).collect();
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Adds `grads` into the store's gradient slots and applies one Adam update.
pub fn optimizer_step(grads: &Gradients, store: &mut ParamStore, state: &mut AdamState) -> Result<()> {
    store.zero_grads();
    grads.accumulate_into(store);
    adam_step(store, state)
}

/// Classification logits `[n×K]` for a padded batch.
pub fn classification_logits(model: &TransformerModel, tape: &mut Tape, batch: &Batch, mode: Mode) -> Result<Var> {
    let enc = model.encode_batch(tape, batch, mode)?;
    model.classify(tape, &enc)
}

pub fn softmax_rows(logits: &[f64], k: usize) -> Vec<Vec<f64>> {
    logits
        .chunks(k)
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|x| x / s).collect()
        })
        .collect()
}

/// Eval-mode class probabilities for every example, in order.
pub fn class_probabilities(model: &TransformerModel, data: &EncodedDataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let k = model.config().num_classes;
    let mut out = Vec::with_capacity(data.len());
    for rows in sequential_batches(data.len(), batch_size) {
        let batch = data.batch(&rows)?;
        let mut tape = Tape::new();
        let logits = classification_logits(model, &mut tape, &batch, Mode::Eval)?;
        out.extend(softmax_rows(tape.data(logits), k));
    }
    Ok(out)
}

pub fn predict_classes(model: &TransformerModel, data: &EncodedDataset, batch_size: usize) -> Result<Vec<usize>> {
    Ok(class_probabilities(model, data, batch_size)?.iter().map(|p| argmax(p)).collect())
}

/// Fraction of labelled examples predicted correctly.
pub fn classification_accuracy(model: &TransformerModel, data: &EncodedDataset, batch_size: usize) -> Result<f64> {
    let gold = data
        .all_labels()
        .ok_or_else(|| Error::Label("every example needs a label to compute accuracy".into()))?;
    crate::metrics::accuracy(&predict_classes(model, data, batch_size)?, &gold)
}

/// Per-batch weights rescaled to mean 1. Equal nonzero weights give `None`,
/// so uniformly weighted training follows the unweighted path exactly.
pub fn renormalized_weights(w: &[f64]) -> Option<Vec<f64>> {
    if w.is_empty() || (w[0] != 0.0 && w.iter().all(|x| x.to_bits() == w[0].to_bits())) {
        return None;
    }
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    if mean == 0.0 {
        return Some(w.to_vec());
    }
    Some(w.iter().map(|x| x / mean).collect())
}

/// One epoch of cross-entropy fine-tuning; returns the mean batch loss.
/// `weights`, when given, holds one loss weight per example of `data`;
/// each batch's weights are rescaled to mean 1.
pub fn train_classifier_epoch(
    model: &mut TransformerModel,
    state: &mut AdamState,
    data: &EncodedDataset,
    batch_size: usize,
    rng: &mut Rng,
    weights: Option<&[f64]>,
) -> Result<f64> {
    if let Some(w) = weights {
        if w.len() != data.len() {
            return Err(Error::State(format!("{} weights for {} examples", w.len(), data.len())));
        }
    }
    let batches = shuffled_batches(data.len(), batch_size, rng);
    let mut total = 0.0;
    for rows in &batches {
        let batch = data.batch(rows)?;
        let targets: Vec<Option<usize>> = rows.iter().map(|&i| data.labels[i]).collect();
        let w: Option<Vec<f64>> = match weights {
            Some(w) => renormalized_weights(&rows.iter().map(|&i| w[i]).collect::<Vec<_>>()),
            None => None,
        };
        let mut tape = Tape::new();
        let logits = classification_logits(model, &mut tape, &batch, Mode::Train(rng))?;
        let loss = tape.cross_entropy_masked(logits, &targets, w.as_deref())?;
        total += tape.value(loss).item();
        let grads = tape.gradients(loss)?;
        drop(tape);
        optimizer_step(&grads, model.params_mut(), state)?;
    }
    Ok(total / batches.len().max(1) as f64)
}

/// Masked-LM loss: mean cross-entropy over every position whose label is not
/// [`IGNORE_INDEX`]. `ids` and `labels` are row-major `[n×L]`.
pub fn mlm_loss(
    model: &TransformerModel,
    tape: &mut Tape,
    input: &EncoderInput,
    labels: &[i64],
    embedding_override: Option<EmbeddingOverride<'_>>,
    mode: Mode,
) -> Result<(Var, crate::model_zoo::Encoded)> {
    if labels.len() != input.ids.len() {
        return Err(Error::dim("mlm_loss", &[input.ids.len()], &[labels.len()]));
    }
    let enc = model.encode(tape, input, embedding_override, mode)?;
    let positions: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != IGNORE_INDEX).collect();
    if positions.is_empty() {
        return Ok((tape.constant(Tensor::scalar(0.0)), enc));
    }
    let targets: Vec<usize> = positions.iter().map(|&i| labels[i] as usize).collect();
    let rows = model.rows(tape, &enc, &positions)?;
    let logits = model.mlm_logits(tape, rows)?;
    Ok((tape.cross_entropy(logits, &targets)?, enc))
}

/// Eval-mode masked-token accuracy: each sequence is masked with the BERT
/// scheme (one PRNG seeded by `seed`, drawn in order) and the argmax at every
/// selected position is compared with the original token. Returns
/// `(correct, total)`.
pub fn masked_token_accuracy(
    model: &TransformerModel,
    seqs: &[TokenSequence],
    mask_prob: f64,
    seed: u64,
    batch_size: usize,
) -> Result<(usize, usize)> {
    let mut rng = Rng::new(seed);
    let v = model.config().vocab_size;
    let masked: Vec<(Vec<u32>, Vec<i64>)> = seqs
        .iter()
        .map(|s| apply_mlm_masking_with(s, v, MlmScheme::bert(mask_prob), &mut rng))
        .collect();
    let (mut correct, mut total) = (0, 0);
    for rows in sequential_batches(masked.len(), batch_size) {
        let ids: Vec<Vec<u32>> = rows.iter().map(|&i| masked[i].0.clone()).collect();
        let labels: Vec<Vec<i64>> = rows.iter().map(|&i| masked[i].1.clone()).collect();
        let (input, flat) = pad_mlm_rows(&ids, &labels)?;
        let positions: Vec<usize> = (0..flat.len()).filter(|&i| flat[i] != IGNORE_INDEX).collect();
        if positions.is_empty() {
            continue;
        }
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &input, None, Mode::Eval)?;
        let h = model.rows(&mut tape, &enc, &positions)?;
        let logits = model.mlm_logits(&mut tape, h)?;
        let pred = crate::metrics::argmax_rows(tape.data(logits), v);
        correct += pred.iter().zip(&positions).filter(|(p, &i)| **p as i64 == flat[i]).count();
        total += positions.len();
    }
    Ok((correct, total))
}

/// Pads id/label rows into an encoder input and flat label vector.
pub fn pad_mlm_rows(rows: &[Vec<u32>], labels: &[Vec<i64>]) -> Result<(EncoderInput, Vec<i64>)> {
    let input = EncoderInput::from_rows(rows)?;
    let mut flat = vec![IGNORE_INDEX; input.n * input.len];
    for (i, l) in labels.iter().enumerate() {
        flat[i * input.len..i * input.len + l.len()].copy_from_slice(l);
    }
    Ok((input, flat))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::AdamConfig;
    use crate::data_hub::{encode_records, toy, InputSpec, LabelMap, Task};
    use crate::model_zoo::ModelConfig;
    use crate::tokenization::build_vocab;

    #[test]
    fn batches_cover_every_row_once() {
        let mut rng = Rng::new(1);
        let b = shuffled_batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn classifier_learns_toy_topics() {
        let recs = toy::toy_tnews(32, 3);
        let schema = toy::tnews_schema();
        let texts: Vec<&str> = recs.iter().map(|r| r.text("sent").unwrap()).collect();
        let vocab = build_vocab(&texts, 1).unwrap();
        let spec = InputSpec {
            task: Task::TextClassify,
            first_sequence: "sent".into(),
            second_sequence: None,
            label_name: Some("label".into()),
            max_len: 16,
        };
        let data = encode_records(&recs, &schema, &vocab, &spec, Some(&LabelMap::parse("0,1").unwrap())).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            hidden_dim: 16,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 32,
            max_position: 16,
            num_classes: 2,
            num_relations: 0,
            dropout_prob: 0.0,
        };
        let mut model = TransformerModel::init(&cfg, 1).unwrap();
        let mut state = AdamState::new(model.params(), AdamConfig::with_lr(3e-3));
        let mut rng = Rng::new(2);
        let first = train_classifier_epoch(&mut model, &mut state, &data, 8, &mut rng, None).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = train_classifier_epoch(&mut model, &mut state, &data, 8, &mut rng, None).unwrap();
        }
        assert!(last < first);
        assert_eq!(classification_accuracy(&model, &data, 8).unwrap(), 1.0);
    }

    #[test]
    fn weight_renormalization() {
        assert_eq!(renormalized_weights(&[0.5, 0.5]), None);
        assert_eq!(renormalized_weights(&[1.0, 3.0]), Some(vec![0.5, 1.5]));
        assert_eq!(renormalized_weights(&[0.0, 0.0]), Some(vec![0.0, 0.0]));
    }

    #[test]
    fn mlm_loss_without_targets_is_zero() {
        let cfg = ModelConfig {
            vocab_size: 12,
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 8,
            max_position: 8,
            num_classes: 2,
            num_relations: 0,
            dropout_prob: 0.0,
        };
        let model = TransformerModel::init(&cfg, 1).unwrap();
        let (input, labels) = pad_mlm_rows(&[vec![2, 6, 3]], &[vec![IGNORE_INDEX; 3]]).unwrap();
        let mut tape = Tape::new();
        let (l, _) = mlm_loss(&model, &mut tape, &input, &labels, None, Mode::Eval).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }
}
