use crate::autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model_zoo::ModelConfig;
use crate::rng::Rng;
use crate::tokenization::{Batch, PAD_ID};

pub const LAYER_NORM_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

/// Forward-pass mode. Dropout is only active in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

#[derive(Debug, Clone)]
struct LayerIds {
    attn_norm: (ParamId, ParamId),
    query: (ParamId, ParamId),
    key: (ParamId, ParamId),
    value: (ParamId, ParamId),
    output: (ParamId, ParamId),
    ffn_norm: (ParamId, ParamId),
    ffn_in: (ParamId, ParamId),
    ffn_out: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
struct ModelIds {
    token_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    final_norm: (ParamId, ParamId),
    mlm_bias: ParamId,
    pooler: (ParamId, ParamId),
    classifier: (ParamId, ParamId),
    relation: Option<(ParamId, ParamId)>,
}

/// Parameter names and shapes, in creation order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, d, f, p) = (cfg.vocab_size, cfg.hidden_dim, cfg.ffn_dim, cfg.max_position);
    let mut out = vec![
        ("embeddings.token".to_string(), vec![v, d]),
        ("embeddings.position".to_string(), vec![p, d]),
    ];
    for l in 0..cfg.num_layers {
        let pre = format!("layers.{l}");
        out.push((format!("{pre}.attn_norm.gamma"), vec![d]));
        out.push((format!("{pre}.attn_norm.beta"), vec![d]));
        for proj in ["query", "key", "value", "output"] {
            out.push((format!("{pre}.attn.{proj}.weight"), vec![d, d]));
            out.push((format!("{pre}.attn.{proj}.bias"), vec![d]));
        }
        out.push((format!("{pre}.ffn_norm.gamma"), vec![d]));
        out.push((format!("{pre}.ffn_norm.beta"), vec![d]));
        out.push((format!("{pre}.ffn.in.weight"), vec![d, f]));
        out.push((format!("{pre}.ffn.in.bias"), vec![f]));
        out.push((format!("{pre}.ffn.out.weight"), vec![f, d]));
        out.push((format!("{pre}.ffn.out.bias"), vec![d]));
    }
    out.push(("final_norm.gamma".into(), vec![d]));
    out.push(("final_norm.beta".into(), vec![d]));
    out.push(("mlm_head.bias".into(), vec![v]));
    out.push(("pooler.weight".into(), vec![d, d]));
    out.push(("pooler.bias".into(), vec![d]));
    out.push(("classifier.weight".into(), vec![d, cfg.num_classes]));
    out.push(("classifier.bias".into(), vec![cfg.num_classes]));
    if cfg.num_relations > 0 {
        out.push(("relation_head.weight".into(), vec![d, cfg.num_relations]));
        out.push(("relation_head.bias".into(), vec![cfg.num_relations]));
    }
    out
}

impl ModelIds {
    fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let get = |name: &str| {
            store
                .id_of(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name:?}")))
        };
        let pair = |prefix: &str, a: &str, b: &str| -> Result<(ParamId, ParamId)> {
            Ok((get(&format!("{prefix}.{a}"))?, get(&format!("{prefix}.{b}"))?))
        };
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let pre = format!("layers.{l}");
            layers.push(LayerIds {
                attn_norm: pair(&format!("{pre}.attn_norm"), "gamma", "beta")?,
                query: pair(&format!("{pre}.attn.query"), "weight", "bias")?,
                key: pair(&format!("{pre}.attn.key"), "weight", "bias")?,
                value: pair(&format!("{pre}.attn.value"), "weight", "bias")?,
                output: pair(&format!("{pre}.attn.output"), "weight", "bias")?,
                ffn_norm: pair(&format!("{pre}.ffn_norm"), "gamma", "beta")?,
                ffn_in: pair(&format!("{pre}.ffn.in"), "weight", "bias")?,
                ffn_out: pair(&format!("{pre}.ffn.out"), "weight", "bias")?,
            });
        }
        Ok(ModelIds {
            token_emb: get("embeddings.token")?,
            pos_emb: get("embeddings.position")?,
            layers,
            final_norm: pair("final_norm", "gamma", "beta")?,
            mlm_bias: get("mlm_head.bias")?,
            pooler: pair("pooler", "weight", "bias")?,
            classifier: pair("classifier", "weight", "bias")?,
            relation: if cfg.num_relations > 0 {
                Some(pair("relation_head", "weight", "bias")?)
            } else {
                None
            },
        })
    }
}

/// Ids, attention mask and shape of a padded batch, as consumed by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub n: usize,
    pub len: usize,
    pub ids: Vec<u32>,
    pub attention: Vec<bool>,
}

impl EncoderInput {
    pub fn from_batch(batch: &Batch) -> Self {
        EncoderInput {
            n: batch.n,
            len: batch.len,
            ids: batch.input_ids.clone(),
            attention: batch.attention_mask.iter().map(|&m| m != 0).collect(),
        }
    }

    /// Builds an input from id rows, treating [PAD] as masked.
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let refs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
        let batch = crate::tokenization::pad_id_rows(&refs, None)?;
        Ok(Self::from_batch(&batch))
    }
}

/// Input-embedding rows to substitute before position embeddings are added.
/// `positions` index the flattened `n·L` token grid.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingOverride<'a> {
    pub positions: &'a [usize],
    pub rows: Var,
}

/// Encoder output: final hidden states `[n·L × d]` plus the per-layer
/// attention probabilities `[n·H × L × L]`.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub hidden: Var,
    pub n: usize,
    pub len: usize,
    pub attention_probs: Vec<Var>,
}

impl Encoded {
    pub fn flat(&self, row: usize, pos: usize) -> usize {
        row * self.len + pos
    }
}

/// Pre-norm transformer encoder with tied MLM head, tanh pooler,
/// classification head and optional relation-decoding head.
#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    params: ParamStore,
    ids: ModelIds,
}

impl TransformerModel {
    /// Weights ~ N(0, 0.02) truncated at 2σ, biases 0, norm gains 1.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        for (name, shape) in parameter_layout(config) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.ends_with(".bias") || name.ends_with(".beta") {
                vec![0.0; n]
            } else {
                (0..n).map(|_| rng.truncated_normal(INIT_STD)).collect()
            };
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        Self::from_params(config.clone(), store)
    }

    /// Wraps an existing store; its names and shapes must match the layout.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut expected = parameter_layout(&config);
        expected.sort();
        let actual = params.manifest();
        if expected != actual {
            let exp_names: std::collections::BTreeSet<_> = expected.iter().map(|(n, _)| n.clone()).collect();
            let act_names: std::collections::BTreeSet<_> = actual.iter().map(|(n, _)| n.clone()).collect();
            let missing: Vec<_> = exp_names.difference(&act_names).cloned().collect();
            let extra: Vec<_> = act_names.difference(&exp_names).cloned().collect();
            return Err(Error::Format(format!(
                "parameter set does not match config; missing {missing:?}, extra {extra:?}"
            )));
        }
        let ids = ModelIds::resolve(&params, &config)?;
        Ok(TransformerModel { config, params, ids })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn token_embeddings(&self) -> &Tensor {
        self.params.get(self.ids.token_emb)
    }

    pub fn token_embeddings_id(&self) -> ParamId {
        self.ids.token_emb
    }

    pub fn classifier_ids(&self) -> (ParamId, ParamId) {
        self.ids.classifier
    }

    pub fn relation_ids(&self) -> Option<(ParamId, ParamId)> {
        self.ids.relation
    }

    pub fn mlm_bias_id(&self) -> ParamId {
        self.ids.mlm_bias
    }

    /// Copies every parameter of `source` whose name and shape match one of
    /// ours; returns the names left at their current values (e.g. a
    /// classifier resized for a new label set).
    pub fn warm_start_from(&mut self, source: &TransformerModel) -> Vec<String> {
        let mut kept = Vec::new();
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            let name = self.params.name(id).to_string();
            match source.params.by_name(&name) {
                Some(src) if src.shape() == self.params.get(id).shape() => {
                    self.params.get_mut(id).data_mut().copy_from_slice(src.data());
                }
                _ => kept.push(name),
            }
        }
        kept
    }

    /// Freezes (`false`) or unfreezes every backbone parameter.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.set_all_trainable(trainable);
    }

    fn p(&self, tape: &mut Tape, id: ParamId) -> Var {
        tape.param(&self.params, id)
    }

    fn dropout(&self, tape: &mut Tape, x: Var, mode: &mut Mode) -> Result<Var> {
        let p = self.config.dropout_prob;
        let Mode::Train(rng) = mode else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }

    fn linear(&self, tape: &mut Tape, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let w = self.p(tape, w);
        let b = self.p(tape, b);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }

    fn norm(&self, tape: &mut Tape, x: Var, (g, b): (ParamId, ParamId)) -> Result<Var> {
        let g = self.p(tape, g);
        let b = self.p(tape, b);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }

    /// `[n·L × d]` → `[n·H × L × dh]`
    fn split_heads(&self, tape: &mut Tape, x: Var, n: usize, len: usize) -> Result<Var> {
        let (h, dh) = (self.config.num_heads, self.config.head_dim());
        let x = tape.reshape(x, &[n, len, h, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[n * h, len, dh])
    }

    fn merge_heads(&self, tape: &mut Tape, x: Var, n: usize, len: usize) -> Result<Var> {
        let (h, dh) = (self.config.num_heads, self.config.head_dim());
        let x = tape.reshape(x, &[n, h, len, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[n * len, h * dh])
    }

    /// Embeds `input` (token + position, with optional row overrides) and runs
    /// the encoder stack.
    pub fn encode(
        &self,
        tape: &mut Tape,
        input: &EncoderInput,
        embedding_override: Option<EmbeddingOverride<'_>>,
        mut mode: Mode,
    ) -> Result<Encoded> {
        let (n, len) = (input.n, input.len);
        if input.ids.len() != n * len || input.attention.len() != n * len {
            return Err(Error::dim("encode", &[n, len], &[input.ids.len()]));
        }
        if len > self.config.max_position {
            return Err(Error::Domain(format!(
                "sequence length {len} exceeds max_position {}",
                self.config.max_position
            )));
        }
        if let Some(&bad) = input.ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::Index(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
        let tok_table = self.p(tape, self.ids.token_emb);
        let mut tok = tape.gather_rows(tok_table, &ids)?;
        if let Some(ov) = embedding_override {
            tok = tape.replace_rows(tok, ov.positions, ov.rows)?;
        }
        let pos_table = self.p(tape, self.ids.pos_emb);
        let pos_ids: Vec<usize> = (0..n).flat_map(|_| 0..len).collect();
        let pos = tape.gather_rows(pos_table, &pos_ids)?;
        let mut x = tape.add(tok, pos)?;
        x = self.dropout(tape, x, &mut mode)?;

        let heads = self.config.num_heads;
        let mut keep = Vec::with_capacity(n * heads * len * len);
        for b in 0..n {
            let row = &input.attention[b * len..(b + 1) * len];
            for _ in 0..heads * len {
                keep.extend_from_slice(row);
            }
        }
        let scale = 1.0 / (self.config.head_dim() as f64).sqrt();
        let mut attention_probs = Vec::with_capacity(self.config.num_layers);
        for layer in &self.ids.layers {
            let h = self.norm(tape, x, layer.attn_norm)?;
            let q = self.linear(tape, h, layer.query)?;
            let k = self.linear(tape, h, layer.key)?;
            let v = self.linear(tape, h, layer.value)?;
            let q = self.split_heads(tape, q, n, len)?;
            let k = self.split_heads(tape, k, n, len)?;
            let v = self.split_heads(tape, v, n, len)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.masked_softmax(scores, &keep)?;
            attention_probs.push(probs);
            let ctx = tape.batch_matmul(probs, v, false)?;
            let ctx = self.merge_heads(tape, ctx, n, len)?;
            let attn_out = self.linear(tape, ctx, layer.output)?;
            let attn_out = self.dropout(tape, attn_out, &mut mode)?;
            x = tape.add(x, attn_out)?;

            let h = self.norm(tape, x, layer.ffn_norm)?;
            let h = self.linear(tape, h, layer.ffn_in)?;
            let h = tape.gelu(h)?;
            let h = self.linear(tape, h, layer.ffn_out)?;
            let h = self.dropout(tape, h, &mut mode)?;
            x = tape.add(x, h)?;
        }
        let hidden = self.norm(tape, x, self.ids.final_norm)?;
        Ok(Encoded {
            hidden,
            n,
            len,
            attention_probs,
        })
    }

    /// Encodes a padded [`Batch`].
    pub fn encode_batch(&self, tape: &mut Tape, batch: &Batch, mode: Mode) -> Result<Encoded> {
        self.encode(tape, &EncoderInput::from_batch(batch), None, mode)
    }

    /// Tied projection onto the vocabulary: `rows [N×d] · Eᵀ + b` → `[N×V]`.
    pub fn mlm_logits(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        let shape = tape.shape(rows);
        if shape.len() != 2 || shape[1] != self.config.hidden_dim {
            return Err(Error::dim("mlm_logits", shape, &[self.config.hidden_dim]));
        }
        let e = self.p(tape, self.ids.token_emb);
        let b = self.p(tape, self.ids.mlm_bias);
        let logits = tape.matmul_bt(rows, e)?;
        tape.add_bias(logits, b)
    }

    /// MLM logits restricted to a subset of vocabulary ids, `[N×|ids|]`.
    pub fn mlm_logits_for(&self, tape: &mut Tape, rows: Var, vocab_ids: &[usize]) -> Result<Var> {
        let shape = tape.shape(rows);
        if shape.len() != 2 || shape[1] != self.config.hidden_dim {
            return Err(Error::dim("mlm_logits_for", shape, &[self.config.hidden_dim]));
        }
        let e = self.p(tape, self.ids.token_emb);
        let b = self.p(tape, self.ids.mlm_bias);
        let e_sub = tape.gather_rows(e, vocab_ids)?;
        let b_col = tape.reshape(b, &[self.config.vocab_size, 1])?;
        let b_sub = tape.gather_rows(b_col, vocab_ids)?;
        let b_sub = tape.reshape(b_sub, &[vocab_ids.len()])?;
        let logits = tape.matmul_bt(rows, e_sub)?;
        tape.add_bias(logits, b_sub)
    }

    /// Hidden rows at the given flat positions, `[P×d]`.
    pub fn rows(&self, tape: &mut Tape, enc: &Encoded, flat_positions: &[usize]) -> Result<Var> {
        tape.gather_rows(enc.hidden, flat_positions)
    }

    /// `tanh(W·h_[CLS] + b)` per sequence, `[n×d]`.
    pub fn pooled(&self, tape: &mut Tape, enc: &Encoded) -> Result<Var> {
        let cls: Vec<usize> = (0..enc.n).map(|i| i * enc.len).collect();
        let h = tape.gather_rows(enc.hidden, &cls)?;
        self.pool_rows(tape, h)
    }

    /// Pooler applied to arbitrary `[n×d]` rows.
    pub fn pool_rows(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        let shape = tape.shape(rows);
        if shape.len() != 2 || shape[1] != self.config.hidden_dim {
            return Err(Error::dim("pool", shape, &[self.config.hidden_dim]));
        }
        let y = self.linear(tape, rows, self.ids.pooler)?;
        tape.tanh(y)
    }

    pub fn classify_pooled(&self, tape: &mut Tape, pooled: Var) -> Result<Var> {
        let shape = tape.shape(pooled);
        if shape.len() != 2 || shape[1] != self.config.hidden_dim {
            return Err(Error::dim("classify", shape, &[self.config.hidden_dim]));
        }
        self.linear(tape, pooled, self.ids.classifier)
    }

    /// Classification logits `[n×K]` from the [CLS] position.
    pub fn classify(&self, tape: &mut Tape, enc: &Encoded) -> Result<Var> {
        let pooled = self.pooled(tape, enc)?;
        self.classify_pooled(tape, pooled)
    }

    /// Relation-decoding logits `[S×R]`.
    pub fn relation_logits(&self, tape: &mut Tape, rows: Var) -> Result<Var> {
        let ids = self
            .ids
            .relation
            .ok_or_else(|| Error::Config("model has no relation head (num_relations = 0)".into()))?;
        let shape = tape.shape(rows);
        if shape.len() != 2 || shape[1] != self.config.hidden_dim {
            return Err(Error::dim("relation_logits", shape, &[self.config.hidden_dim]));
        }
        self.linear(tape, rows, ids)
    }
}

/// Flat positions of non-[PAD] tokens, for tests and pooling helpers.
pub fn non_pad_positions(input: &EncoderInput) -> Vec<usize> {
    input
        .ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id != PAD_ID)
        .map(|(i, _)| i)
        .collect()
}
