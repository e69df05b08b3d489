//! Knowledge-enhanced pre-training.
//!
//! Long-tail entities (rare in the corpus, present in the knowledge base) are
//! masked wholesale and their input embeddings are replaced by a pseudo token
//! representation composed from existing token embeddings of their relations
//! and tails. A relation-decoding head predicts one of the entity's relations
//! from the mean hidden state over the span. No parameters are added beyond
//! the relation head that every model of the same config already carries.
//!
//! Pseudo embedding of entity `e` with triples `(e, r_i, t_i)`, `i = 1..m`:
//!
//! ```text
//! c_i = mean(E[tokens(r_i)]) + mean(E[tokens(t_i)])
//! p   = mean_i c_i
//! out = p / ‖p‖ · mean_v ‖E[v]‖
//! ```
//!
//! Relation names are read through [`relation_surface`], OOV tokens use [UNK].

use std::collections::{BTreeMap, BTreeSet, HashSet};

use log::warn;

use crate::autograd::{AdamConfig, AdamState, Tape, Tensor, Var};
use crate::data_hub::{relation_surface, EntityStats, Triple, TripleStore};
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::model_zoo::{EmbeddingOverride, EncoderInput, Mode, TransformerModel};
use crate::rng::Rng;
use crate::tokenization::{apply_mlm_masking_with, tokenize, MlmScheme, TokenSequence, Vocabulary, MASK_ID};
use crate::train::{mlm_loss, optimizer_step, shuffled_batches};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongTailPolicy {
    pub tail_quantile: f64,
    pub min_triples: usize,
}

impl Default for LongTailPolicy {
    fn default() -> Self {
        LongTailPolicy {
            tail_quantile: 0.5,
            min_triples: 1,
        }
    }
}

/// Nearest-rank quantile: the `ceil(q·n)`-th smallest value (1-based, at least 1).
pub fn nearest_rank(sorted: &[usize], q: f64) -> usize {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Entities at or below the `tail_quantile` corpus count that have at least
/// `min_triples` knowledge-base triples.
pub fn select_longtail_entities(stats: &EntityStats, kb: &TripleStore, policy: LongTailPolicy) -> Result<BTreeSet<String>> {
    if !(policy.tail_quantile > 0.0 && policy.tail_quantile <= 1.0) {
        return Err(Error::Config(format!("tail_quantile {} outside (0, 1]", policy.tail_quantile)));
    }
    if policy.min_triples == 0 {
        return Err(Error::Config("min_triples must be at least 1".into()));
    }
    if stats.is_empty() {
        return Err(Error::Domain("no entity statistics".into()));
    }
    let mut counts: Vec<usize> = stats.counts.values().copied().collect();
    counts.sort_unstable();
    let threshold = nearest_rank(&counts, policy.tail_quantile);
    Ok(stats
        .counts
        .iter()
        .filter(|(e, &c)| c <= threshold && kb.count_about(e) >= policy.min_triples)
        .map(|(e, _)| e.clone())
        .collect())
}

fn mean_rows(table: &Tensor, ids: &[u32]) -> Result<Vec<f64>> {
    let d = table.shape()[1];
    if ids.is_empty() {
        return Err(Error::Domain("empty surface form".into()));
    }
    let mut out = vec![0.0; d];
    for &id in ids {
        for (o, v) in out.iter_mut().zip(table.row(id as usize)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= ids.len() as f64);
    Ok(out)
}

fn surface_ids(vocab: &Vocabulary, text: &str) -> Vec<u32> {
    tokenize(text).iter().map(|t| vocab.id(t)).collect()
}

/// Mean L2 norm of the rows of a `[V×d]` table.
pub fn mean_row_norm(table: &Tensor) -> f64 {
    let d = table.shape()[1];
    let v = table.shape()[0];
    table.data().chunks(d).map(|r| r.iter().map(|x| x * x).sum::<f64>().sqrt()).sum::<f64>() / v as f64
}

/// Pseudo embedding from an explicit list of triples (see the module docs).
pub fn pseudo_embedding_from(triples: &[&Triple], table: &Tensor, vocab: &Vocabulary) -> Result<Vec<f64>> {
    if triples.is_empty() {
        return Err(Error::Domain("entity has no triples".into()));
    }
    let d = table.shape()[1];
    let mut p = vec![0.0; d];
    for t in triples {
        let r = mean_rows(table, &surface_ids(vocab, &relation_surface(&t.relation)))?;
        let tail = mean_rows(table, &surface_ids(vocab, &t.tail))?;
        for ((acc, a), b) in p.iter_mut().zip(r).zip(tail) {
            *acc += a + b;
        }
    }
    p.iter_mut().for_each(|x| *x /= triples.len() as f64);
    let norm = p.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Domain("pseudo embedding has zero norm".into()));
    }
    let scale = mean_row_norm(table) / norm;
    Ok(p.into_iter().map(|x| x * scale).collect())
}

pub fn pseudo_token_embedding(
    entity: &str,
    kb: &TripleStore,
    model: &TransformerModel,
    vocab: &Vocabulary,
) -> Result<Vec<f64>> {
    let triples: Vec<&Triple> = kb.about(entity).collect();
    if triples.is_empty() {
        return Err(Error::Domain(format!("entity {entity:?} has no triples")));
    }
    pseudo_embedding_from(&triples, model.token_embeddings(), vocab)
}

/// A long-tail span whose input rows are replaced by `pseudo`.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectedSpan {
    pub start: usize,
    pub end: usize,
    pub entity: String,
    pub pseudo: Vec<f64>,
    pub relation: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainExample {
    pub ids: Vec<u32>,
    pub labels: Vec<i64>,
    pub spans: Vec<InjectedSpan>,
}

/// Masks `seqs` for pre-training. Regular MLM masking runs first; then every
/// annotated span of a long-tail entity is replaced by [MASK] with the
/// original tokens as labels, and gets a pseudo embedding plus the relation
/// of one uniformly drawn triple as its decoding target.
pub fn build_pretrain_batch(
    seqs: &[TokenSequence],
    kb: &TripleStore,
    longtail: &BTreeSet<String>,
    model: &TransformerModel,
    vocab: &Vocabulary,
    mask_prob: f64,
    seed: u64,
) -> Result<Vec<PretrainExample>> {
    let mut rng = Rng::new(seed);
    let mut pseudo_cache: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let v = model.config().vocab_size;
    let mut out = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let (mut ids, mut labels) = apply_mlm_masking_with(seq, v, MlmScheme::bert(mask_prob), &mut rng);
        let mut spans = Vec::new();
        for span in &seq.entity_spans {
            let Some(entity) = longtail.get(&span.entity) else { continue };
            let triples: Vec<&Triple> = kb.about(entity).collect();
            if triples.is_empty() {
                continue;
            }
            if !pseudo_cache.contains_key(entity.as_str()) {
                let p = pseudo_embedding_from(&triples, model.token_embeddings(), vocab)?;
                pseudo_cache.insert(entity.as_str(), p);
            }
            for pos in span.start..span.end {
                labels[pos] = seq.ids[pos] as i64;
                ids[pos] = MASK_ID;
            }
            let pick = triples[rng.below(triples.len())];
            let relation = kb.relation_id(&pick.relation).expect("relation of a stored triple");
            spans.push(InjectedSpan {
                start: span.start,
                end: span.end,
                entity: entity.clone(),
                pseudo: pseudo_cache[entity.as_str()].clone(),
                relation,
            });
        }
        out.push(PretrainExample { ids, labels, spans });
    }
    Ok(out)
}

/// `L_mlm + λ_rel · L_rel` over a batch of examples.
///
/// `L_rel` is the mean cross-entropy of the relation head applied to the mean
/// final hidden state of each injected span. With no injected spans the
/// result is exactly the MLM loss.
pub fn pretrain_forward_loss(
    model: &TransformerModel,
    tape: &mut Tape,
    batch: &[PretrainExample],
    lambda_rel: f64,
    mode: Mode,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Domain("empty pre-training batch".into()));
    }
    let rows: Vec<Vec<u32>> = batch.iter().map(|e| e.ids.clone()).collect();
    let labels: Vec<Vec<i64>> = batch.iter().map(|e| e.labels.clone()).collect();
    let (input, flat_labels) = crate::train::pad_mlm_rows(&rows, &labels)?;
    let d = model.config().hidden_dim;

    let mut positions = Vec::new();
    let mut pseudo_rows = Vec::new();
    let mut span_rows: Vec<(usize, usize, usize)> = Vec::new();
    let mut targets = Vec::new();
    for (i, ex) in batch.iter().enumerate() {
        for s in &ex.spans {
            if s.pseudo.len() != d {
                return Err(Error::dim("pseudo embedding", &[s.pseudo.len()], &[d]));
            }
            if s.end > ex.ids.len() || s.start >= s.end {
                return Err(Error::Index(format!("span {}..{} outside sequence of {}", s.start, s.end, ex.ids.len())));
            }
            for pos in s.start..s.end {
                positions.push(i * input.len + pos);
                pseudo_rows.extend_from_slice(&s.pseudo);
            }
            span_rows.push((i, s.start, s.end));
            targets.push(s.relation);
        }
    }

    let ov = if positions.is_empty() {
        None
    } else {
        let rows = tape.constant(Tensor::new(vec![positions.len(), d], pseudo_rows)?);
        Some(EmbeddingOverride {
            positions: &positions,
            rows,
        })
    };
    let (l_mlm, enc) = mlm_loss(model, tape, &input, &flat_labels, ov, mode)?;
    if span_rows.is_empty() || lambda_rel == 0.0 {
        return Ok(l_mlm);
    }
    let total = input.n * input.len;
    let mut pool = vec![0.0; span_rows.len() * total];
    for (k, &(i, start, end)) in span_rows.iter().enumerate() {
        let w = 1.0 / (end - start) as f64;
        for pos in start..end {
            pool[k * total + i * input.len + pos] = w;
        }
    }
    let pool = tape.constant(Tensor::new(vec![span_rows.len(), total], pool)?);
    let span_mean = tape.matmul(pool, enc.hidden)?;
    let rel_logits = model.relation_logits(tape, span_mean)?;
    let l_rel = tape.cross_entropy(rel_logits, &targets)?;
    let l_rel = tape.scale(l_rel, lambda_rel)?;
    tape.add(l_mlm, l_rel)
}

/// Counts of a P@1 evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub correct: usize,
    pub total: usize,
    pub oov_gold: usize,
}

impl ProbeReport {
    pub fn p_at_1(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// P@1 of cloze probes `(sentence with one [MASK], gold token)`.
///
/// The prediction is the argmax MLM logit at the mask over the full
/// vocabulary, ties to the lowest id. A gold token missing from the
/// vocabulary counts as incorrect.
pub fn knowledge_probe(model: &TransformerModel, vocab: &Vocabulary, probes: &[(String, String)]) -> Result<ProbeReport> {
    if probes.is_empty() {
        return Err(Error::Domain("empty probe set".into()));
    }
    let max_len = model.config().max_position;
    let mut report = ProbeReport {
        correct: 0,
        total: probes.len(),
        oov_gold: 0,
    };
    let mut warned = false;
    for chunk in probes.chunks(32) {
        let mut rows = Vec::with_capacity(chunk.len());
        let mut mask_at = Vec::with_capacity(chunk.len());
        for (sentence, _) in chunk {
            let seq = crate::tokenization::encode(vocab, sentence, max_len);
            let masks: Vec<usize> = (0..seq.ids.len()).filter(|&i| seq.ids[i] == MASK_ID).collect();
            if masks.len() != 1 {
                return Err(Error::Domain(format!("probe {sentence:?} has {} [MASK] tokens; expected 1", masks.len())));
            }
            mask_at.push(masks[0]);
            rows.push(seq.ids);
        }
        let input = EncoderInput::from_rows(&rows)?;
        let mut tape = Tape::new();
        let enc = model.encode(&mut tape, &input, None, Mode::Eval)?;
        let flat: Vec<usize> = mask_at.iter().enumerate().map(|(i, &p)| enc.flat(i, p)).collect();
        let h = model.rows(&mut tape, &enc, &flat)?;
        let logits = model.mlm_logits(&mut tape, h)?;
        let v = model.config().vocab_size;
        for ((_, gold), row) in chunk.iter().zip(tape.data(logits).chunks(v)) {
            match vocab.get(&gold.to_lowercase()) {
                Some(g) if argmax(row) == g as usize => report.correct += 1,
                Some(_) => {}
                None => {
                    report.oov_gold += 1;
                    if !warned {
                        warn!("probe gold token {gold:?} is out of vocabulary; counted as incorrect");
                        warned = true;
                    }
                }
            }
        }
    }
    Ok(report)
}

/// P@1 of always answering the most common gold token (ties: lexicographically first).
pub fn majority_baseline(probes: &[(String, String)]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Domain("empty probe set".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, g) in probes {
        *counts.entry(g.as_str()).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    Ok(best as f64 / probes.len() as f64)
}

/// Settings for [`pretrain`].
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub mask_prob: f64,
    pub lambda_rel: f64,
    pub seed: u64,
    /// `false` trains plain MLM on the same corpus (the ablation).
    pub inject: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            mask_prob: 0.15,
            lambda_rel: 1.0,
            seed: 42,
            inject: true,
        }
    }
}

/// Epoch-at-a-time pre-training state: optimiser moments and the PRNG.
#[derive(Debug)]
pub struct Pretrainer<'a> {
    corpus: &'a [TokenSequence],
    kb: &'a TripleStore,
    longtail: BTreeSet<String>,
    vocab: &'a Vocabulary,
    cfg: PretrainConfig,
    state: AdamState,
    rng: Rng,
}

impl<'a> Pretrainer<'a> {
    pub fn new(
        model: &TransformerModel,
        corpus: &'a [TokenSequence],
        kb: &'a TripleStore,
        longtail: &BTreeSet<String>,
        vocab: &'a Vocabulary,
        cfg: &PretrainConfig,
    ) -> Result<Self> {
        if cfg.inject && model.config().num_relations < kb.num_relations() {
            return Err(Error::Config(format!(
                "model decodes {} relations but the knowledge base has {}",
                model.config().num_relations,
                kb.num_relations()
            )));
        }
        Ok(Pretrainer {
            corpus,
            kb,
            longtail: if cfg.inject { longtail.clone() } else { BTreeSet::new() },
            vocab,
            cfg: cfg.clone(),
            state: AdamState::new(model.params(), AdamConfig::with_lr(cfg.learning_rate)),
            rng: Rng::new(cfg.seed),
        })
    }

    /// One pass over the corpus; returns the mean batch loss.
    pub fn epoch(&mut self, model: &mut TransformerModel) -> Result<f64> {
        let mut total = 0.0;
        let batches = shuffled_batches(self.corpus.len(), self.cfg.batch_size, &mut self.rng);
        for rows in &batches {
            let seqs: Vec<TokenSequence> = rows.iter().map(|&i| self.corpus[i].clone()).collect();
            let seed = self.rng.next_u64();
            let examples = build_pretrain_batch(&seqs, self.kb, &self.longtail, model, self.vocab, self.cfg.mask_prob, seed)?;
            let mut tape = Tape::new();
            let loss = pretrain_forward_loss(model, &mut tape, &examples, self.cfg.lambda_rel, Mode::Train(&mut self.rng))?;
            total += tape.value(loss).item();
            let grads = tape.gradients(loss)?;
            drop(tape);
            optimizer_step(&grads, model.params_mut(), &mut self.state)?;
        }
        Ok(total / batches.len().max(1) as f64)
    }
}

/// Pre-trains `model` on an entity-annotated corpus; returns per-epoch mean losses.
///
/// Masks are redrawn every epoch and pseudo embeddings are recomputed from
/// the current embedding table for every batch.
pub fn pretrain(
    model: &mut TransformerModel,
    corpus: &[TokenSequence],
    kb: &TripleStore,
    longtail: &BTreeSet<String>,
    vocab: &Vocabulary,
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    let mut trainer = Pretrainer::new(model, corpus, kb, longtail, vocab, cfg)?;
    (0..cfg.epochs).map(|_| trainer.epoch(model)).collect()
}

/// Entities named by the knowledge base (heads and tails), for annotation.
pub fn kb_entities(kb: &TripleStore) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for t in kb.triples() {
        if seen.insert(t.head.as_str()) {
            out.push(t.head.clone());
        }
    }
    out
}
