//! Prompt-based few-shot learning: cloze templates with verbalizers,
//! continuous prompts, and a contrastive, verbalizer-free objective that
//! classifies by nearest class centroid.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data_hub::Record;
use crate::error::{Error, Result};
use crate::metrics::argmax;
use crate::model_zoo::{EmbeddingOverride, Encoded, EncoderInput, Mode, TransformerModel};
use crate::rng::Rng;
use crate::tokenization::{tokenize, TokenSequence, Vocabulary, CLS_ID, MASK_ID, SEP_ID, UNK_ID};
use crate::train::{optimizer_step, sequential_batches, shuffled_batches, softmax_rows};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    /// The n-th input text (0-based, in order of appearance).
    Input(usize),
    Mask,
    /// `k` continuous prompt tokens.
    Prompt(usize),
}

/// Cloze template. String form: `{input}` input slot, `{mask}` mask slot,
/// `{p*k}` k prompt tokens, anything else literal text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    segments: Vec<Segment>,
}

impl PromptTemplate {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        let masks = segments.iter().filter(|s| matches!(s, Segment::Mask)).count();
        if masks != 1 {
            return Err(Error::Template(format!("template needs exactly one mask slot, found {masks}")));
        }
        if !segments.iter().any(|s| matches!(s, Segment::Input(_))) {
            return Err(Error::Template("template needs at least one input slot".into()));
        }
        if segments.iter().any(|s| matches!(s, Segment::Prompt(0))) {
            return Err(Error::Template("prompt slot with k = 0".into()));
        }
        Ok(PromptTemplate { segments })
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn num_inputs(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::Input(_))).count()
    }

    /// Total continuous prompt tokens.
    pub fn prompt_len(&self) -> usize {
        self.segments
            .iter()
            .map(|s| if let Segment::Prompt(k) = s { *k } else { 0 })
            .sum()
    }
}

impl FromStr for PromptTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut segments = Vec::new();
        let mut inputs = 0;
        let mut rest = s;
        while let Some(open) = rest.find('{') {
            let literal = rest[..open].trim();
            if !literal.is_empty() {
                segments.push(Segment::Literal(literal.to_string()));
            }
            let close = rest[open..]
                .find('}')
                .ok_or_else(|| Error::Template(format!("unclosed '{{' in {s:?}")))?
                + open;
            let slot = &rest[open + 1..close];
            segments.push(match slot {
                "input" => {
                    inputs += 1;
                    Segment::Input(inputs - 1)
                }
                "mask" => Segment::Mask,
                _ => match slot.strip_prefix("p*") {
                    Some(k) => Segment::Prompt(
                        k.parse()
                            .map_err(|_| Error::Template(format!("bad prompt length in {{{slot}}}")))?,
                    ),
                    None => return Err(Error::Template(format!("unknown slot {{{slot}}}"))),
                },
            });
            rest = &rest[close + 1..];
        }
        let literal = rest.trim();
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal.to_string()));
        }
        PromptTemplate::new(segments)
    }
}

impl fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .segments
            .iter()
            .map(|s| match s {
                Segment::Literal(t) => t.clone(),
                Segment::Input(_) => "{input}".into(),
                Segment::Mask => "{mask}".into(),
                Segment::Prompt(k) => format!("{{p*{k}}}"),
            })
            .collect();
        f.write_str(&parts.join(" "))
    }
}

/// A templated example: encoded ids plus the mask and prompt positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompted {
    pub seq: TokenSequence,
    pub mask_pos: usize,
    pub prompt_positions: Vec<usize>,
}

/// Fills `template` with `inputs`. Prompt positions hold [UNK] placeholders
/// and are overridden by a [`ContinuousPrompt`] at forward time. When the
/// result exceeds `max_len`, input tokens are trimmed (longest input first).
pub fn apply_template(template: &PromptTemplate, inputs: &[&str], vocab: &Vocabulary, max_len: usize) -> Result<Prompted> {
    let mut input_ids: Vec<Vec<u32>> = Vec::new();
    for seg in template.segments() {
        if let Segment::Input(i) = seg {
            let text = inputs
                .get(*i)
                .ok_or_else(|| Error::Template(format!("template input slot {} has no value", i + 1)))?;
            input_ids.push(tokenize(text).iter().map(|t| vocab.id(t)).collect());
        }
    }
    let fixed: usize = 2 + template
        .segments()
        .iter()
        .map(|s| match s {
            Segment::Literal(t) => tokenize(t).len(),
            Segment::Input(_) => 0,
            Segment::Mask => 1,
            Segment::Prompt(k) => *k,
        })
        .sum::<usize>();
    if fixed > max_len {
        return Err(Error::Template(format!("template alone needs {fixed} positions, max_len is {max_len}")));
    }
    while fixed + input_ids.iter().map(Vec::len).sum::<usize>() > max_len {
        let longest = (0..input_ids.len()).rev().max_by_key(|&i| input_ids[i].len()).expect("inputs present");
        input_ids[longest].pop();
    }

    let mut ids = vec![CLS_ID];
    let mut mask_pos = 0;
    let mut prompt_positions = Vec::new();
    for seg in template.segments() {
        match seg {
            Segment::Literal(t) => ids.extend(tokenize(t).iter().map(|w| vocab.id(w))),
            Segment::Input(i) => ids.extend_from_slice(&input_ids[*i]),
            Segment::Mask => {
                mask_pos = ids.len();
                ids.push(MASK_ID);
            }
            Segment::Prompt(k) => {
                for _ in 0..*k {
                    prompt_positions.push(ids.len());
                    ids.push(UNK_ID);
                }
            }
        }
    }
    ids.push(SEP_ID);
    Ok(Prompted {
        seq: TokenSequence {
            ids,
            entity_spans: Vec::new(),
        },
        mask_pos,
        prompt_positions,
    })
}

/// [`apply_template`] reading input slots from named record columns.
pub fn apply_template_record(
    template: &PromptTemplate,
    record: &Record,
    columns: &[&str],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Prompted> {
    if columns.len() < template.num_inputs() {
        return Err(Error::Template(format!(
            "template has {} input slots but only {} columns are named",
            template.num_inputs(),
            columns.len()
        )));
    }
    let texts = columns
        .iter()
        .map(|c| record.text(c).map_err(|_| Error::Template(format!("record has no text column {c:?}"))))
        .collect::<Result<Vec<_>>>()?;
    apply_template(template, &texts, vocab, max_len)
}

/// Injective map from class id to one vocabulary token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verbalizer {
    token_ids: Vec<u32>,
}

impl Verbalizer {
    pub fn new(token_ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if token_ids.is_empty() {
            return Err(Error::Label("verbalizer maps no classes".into()));
        }
        for (k, &t) in token_ids.iter().enumerate() {
            if t as usize >= vocab_size {
                return Err(Error::Index(format!("verbalizer token id {t} outside vocabulary of {vocab_size}")));
            }
            if let Some(j) = token_ids[..k].iter().position(|&u| u == t) {
                return Err(Error::Label(format!("classes {j} and {k} share verbalizer token id {t}")));
            }
        }
        Ok(Verbalizer { token_ids })
    }

    /// One label word per class; every word must be in the vocabulary.
    pub fn from_words<S: AsRef<str>>(words: &[S], vocab: &Vocabulary) -> Result<Self> {
        let ids = words
            .iter()
            .map(|w| {
                let w = w.as_ref().to_lowercase();
                vocab
                    .get(&w)
                    .ok_or_else(|| Error::Label(format!("label word {w:?} is not in the vocabulary")))
            })
            .collect::<Result<Vec<_>>>()?;
        Verbalizer::new(ids, vocab.len())
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn num_classes(&self) -> usize {
        self.token_ids.len()
    }
}

pub const PROMPT_PARAM: &str = "prompt.embeddings";

/// Trainable `[k×d]` prompt rows in their own parameter store.
#[derive(Debug, Clone)]
pub struct ContinuousPrompt {
    store: ParamStore,
    id: ParamId,
}

impl ContinuousPrompt {
    pub fn from_tensor(rows: Tensor) -> Result<Self> {
        if rows.rank() != 2 || rows.shape()[0] == 0 {
            return Err(Error::Config(format!("prompt needs shape [k×d] with k ≥ 1, got {:?}", rows.shape())));
        }
        let mut store = ParamStore::new();
        let id = store.insert(PROMPT_PARAM, rows.with_grad(true))?;
        Ok(ContinuousPrompt { store, id })
    }

    /// `k` rows drawn from N(0, 0.02²).
    pub fn random(k: usize, d: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let data = (0..k * d).map(|_| rng.normal() * 0.02).collect();
        Self::from_tensor(Tensor::new(vec![k, d], data)?)
    }

    /// Rows copied from the model's embeddings of `token_ids`.
    pub fn from_tokens(model: &TransformerModel, token_ids: &[u32]) -> Result<Self> {
        let table = model.token_embeddings();
        let d = table.shape()[1];
        let mut data = Vec::with_capacity(token_ids.len() * d);
        for &t in token_ids {
            if t as usize >= table.shape()[0] {
                return Err(Error::Index(format!("token id {t} outside the embedding table")));
            }
            data.extend_from_slice(table.row(t as usize));
        }
        Self::from_tensor(Tensor::new(vec![token_ids.len(), d], data)?)
    }

    pub fn len(&self) -> usize {
        self.rows().shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn rows(&self) -> &Tensor {
        self.store.get(self.id)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_id(&self) -> ParamId {
        self.id
    }
}

/// Padded batch of templated examples.
#[derive(Debug, Clone)]
pub struct PromptBatch {
    pub input: EncoderInput,
    /// Flat mask position per example.
    pub mask_flat: Vec<usize>,
    /// Flat prompt positions, `k` per example in prompt-row order.
    pub prompt_flat: Vec<usize>,
}

pub fn prompt_batch(examples: &[&Prompted]) -> Result<PromptBatch> {
    let rows: Vec<Vec<u32>> = examples.iter().map(|e| e.seq.ids.clone()).collect();
    let input = EncoderInput::from_rows(&rows)?;
    let len = input.len;
    let k = examples.first().map_or(0, |e| e.prompt_positions.len());
    if examples.iter().any(|e| e.prompt_positions.len() != k) {
        return Err(Error::Template("examples in a batch disagree on prompt length".into()));
    }
    Ok(PromptBatch {
        mask_flat: examples.iter().enumerate().map(|(i, e)| i * len + e.mask_pos).collect(),
        prompt_flat: examples
            .iter()
            .enumerate()
            .flat_map(|(i, e)| e.prompt_positions.iter().map(move |&p| i * len + p))
            .collect(),
        input,
    })
}

/// Encoder forward whose input embeddings at `prompt_flat` are the prompt
/// rows (tiled per example). Without a prompt it is the plain forward.
pub fn ptuning_forward(
    model: &TransformerModel,
    tape: &mut Tape,
    batch: &PromptBatch,
    prompt: Option<&ContinuousPrompt>,
    mode: Mode,
) -> Result<Encoded> {
    let Some(prompt) = prompt else {
        return model.encode(tape, &batch.input, None, mode);
    };
    let k = prompt.len();
    if batch.prompt_flat.len() != k * batch.input.n {
        return Err(Error::dim("ptuning_forward", &[batch.prompt_flat.len()], &[k * batch.input.n]));
    }
    let d = prompt.rows().shape()[1];
    if d != model.config().hidden_dim {
        return Err(Error::dim("ptuning_forward", &[k, d], &[k, model.config().hidden_dim]));
    }
    let table = tape.param(prompt.store(), prompt.param_id());
    let tiled: Vec<usize> = (0..batch.input.n).flat_map(|_| 0..k).collect();
    let rows = tape.gather_rows(table, &tiled)?;
    model.encode(
        tape,
        &batch.input,
        Some(EmbeddingOverride {
            positions: &batch.prompt_flat,
            rows,
        }),
        mode,
    )
}

/// Hidden states at the mask positions, `[n×d]`.
pub fn mask_hiddens(model: &TransformerModel, tape: &mut Tape, enc: &Encoded, batch: &PromptBatch) -> Result<Var> {
    model.rows(tape, enc, &batch.mask_flat)
}

/// Class logits `[n×K]`: the MLM logits of the verbalizer tokens at the mask.
pub fn pet_class_logits(model: &TransformerModel, tape: &mut Tape, mask_rows: Var, verbalizer: &Verbalizer) -> Result<Var> {
    let cols: Vec<usize> = verbalizer.token_ids().iter().map(|&t| t as usize).collect();
    model.mlm_logits_for(tape, mask_rows, &cols)
}

/// Margins and negative-pair cost of the contrastive objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpConfig {
    pub m_pos: f64,
    pub m_neg: f64,
    pub cost: f64,
}

impl Default for CpConfig {
    fn default() -> Self {
        CpConfig {
            m_pos: 0.9,
            m_neg: 0.1,
            cost: 2.0,
        }
    }
}

impl CpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.m_neg && self.m_neg < self.m_pos && self.m_pos <= 1.0) {
            return Err(Error::Config(format!(
                "margins need 0 ≤ m_neg < m_pos ≤ 1, got m_neg {} m_pos {}",
                self.m_neg, self.m_pos
            )));
        }
        if !(self.cost >= 1.0) {
            return Err(Error::Config(format!("cost must be ≥ 1, got {}", self.cost)));
        }
        Ok(())
    }
}

/// Pair-wise cost-sensitive contrastive loss over `[n×d]` mask hiddens.
///
/// ```text
/// s(i,j) = cos(h_i, h_j)
/// loss = 1/n Σ_i [ mean_{p ∈ P(i)} max(0, m_pos − s(i,p))
///                + cost · mean_{q ∈ N(i)} max(0, s(i,q) − m_neg) ]
/// ```
///
/// `P(i)` holds the other members of i's class, `N(i)` everything else; an
/// empty set contributes nothing.
pub fn cp_tuning_loss(tape: &mut Tape, hiddens: Var, labels: &[usize], cfg: CpConfig) -> Result<Var> {
    cfg.validate()?;
    let shape = tape.shape(hiddens).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::dim("cp_tuning_loss", &shape, &[labels.len()]));
    }
    let n = labels.len();
    if n < 2 {
        return Err(Error::Domain(format!("contrastive loss needs at least 2 examples, got {n}")));
    }
    let mut w_pos = vec![0.0; n * n];
    let mut w_neg = vec![0.0; n * n];
    for i in 0..n {
        let pos = (0..n).filter(|&j| j != i && labels[j] == labels[i]).count();
        let neg = (0..n).filter(|&j| labels[j] != labels[i]).count();
        for j in 0..n {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                w_pos[i * n + j] = 1.0 / (n * pos) as f64;
            } else {
                w_neg[i * n + j] = cfg.cost / (n * neg) as f64;
            }
        }
    }
    let unit = tape.normalize_rows(hiddens)?;
    let sim = tape.matmul_bt(unit, unit)?;
    let neg_sim = tape.scale(sim, -1.0)?;
    let pos_gap = tape.add_scalar(neg_sim, cfg.m_pos)?;
    let pos_hinge = tape.relu(pos_gap)?;
    let neg_gap = tape.add_scalar(sim, -cfg.m_neg)?;
    let neg_hinge = tape.relu(neg_gap)?;
    let w_pos = tape.constant(Tensor::new(vec![n, n], w_pos)?);
    let w_neg = tape.constant(Tensor::new(vec![n, n], w_neg)?);
    let a = tape.mul(pos_hinge, w_pos)?;
    let b = tape.mul(neg_hinge, w_neg)?;
    let a = tape.sum(a)?;
    let b = tape.sum(b)?;
    tape.add(a, b)
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Domain("cannot normalize a zero vector".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Unit-norm centroid per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCentroids {
    rows: Vec<Vec<f64>>,
}

impl ClassCentroids {
    /// Centroids from stored rows; each is renormalized to unit length.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || rows.iter().any(|r| r.len() != d) {
            return Err(Error::Format("centroid rows must be non-empty and of equal length".into()));
        }
        Ok(ClassCentroids {
            rows: rows.iter().map(|r| unit(r)).collect::<Result<_>>()?,
        })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }
}

/// Centroid of class k = normalize(mean of normalized members).
pub fn cp_fit_centroids(hiddens: &[Vec<f64>], labels: &[usize], num_classes: usize) -> Result<ClassCentroids> {
    if hiddens.len() != labels.len() {
        return Err(Error::dim("cp_fit_centroids", &[hiddens.len()], &[labels.len()]));
    }
    let d = hiddens.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for (h, &y) in hiddens.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::Index(format!("label {y} outside {num_classes} classes")));
        }
        for (s, x) in sums[y].iter_mut().zip(unit(h)?) {
            *s += x;
        }
        counts[y] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Domain(format!("class {k} has no examples to fit a centroid")));
    }
    let rows = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| unit(&s.iter().map(|x| x / c as f64).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassCentroids { rows })
}

/// Cosine of `hidden` to every centroid.
pub fn cp_similarities(centroids: &ClassCentroids, hidden: &[f64]) -> Result<Vec<f64>> {
    let h = unit(hidden)?;
    Ok(centroids
        .rows
        .iter()
        .map(|c| c.iter().zip(&h).map(|(a, b)| a * b).sum())
        .collect())
}

/// Class with the highest cosine to `hidden`; ties go to the lowest id.
pub fn cp_predict(centroids: &ClassCentroids, hidden: &[f64]) -> Result<usize> {
    Ok(argmax(&cp_similarities(centroids, hidden)?))
}

/// `k` examples per class drawn without replacement (seeded); indices sorted.
pub fn sample_k_shot(labels: &[usize], num_classes: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(k * num_classes);
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.len() < k {
            return Err(Error::Domain(format!("class {c} has {} examples, {k} requested", members.len())));
        }
        rng.shuffle(&mut members);
        out.extend_from_slice(&members[..k]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FewShotMethod {
    Pet,
    PTuning,
    Cp,
}

impl FromStr for FewShotMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pet" => Ok(FewShotMethod::Pet),
            "ptuning" => Ok(FewShotMethod::PTuning),
            "cp" => Ok(FewShotMethod::Cp),
            _ => Err(Error::Config(format!("unknown few-shot method {s:?} (pet, ptuning, cp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub cp: CpConfig,
    /// Train only the continuous prompt, keeping the backbone fixed.
    pub freeze_backbone: bool,
}

impl Default for FewShotConfig {
    fn default() -> Self {
        FewShotConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 42,
            cp: CpConfig::default(),
            freeze_backbone: false,
        }
    }
}

/// A trained few-shot classifier.
#[derive(Debug, Clone)]
pub struct FewShotModel {
    pub method: FewShotMethod,
    pub model: TransformerModel,
    pub prompt: Option<ContinuousPrompt>,
    pub verbalizer: Option<Verbalizer>,
    pub centroids: Option<ClassCentroids>,
}

fn class_count(labels: &[usize], verbalizer: Option<&Verbalizer>) -> usize {
    verbalizer.map_or_else(|| labels.iter().max().map_or(0, |m| m + 1), Verbalizer::num_classes)
}

/// Mask hiddens of every example, eval mode, in order.
pub fn collect_mask_hiddens(
    model: &TransformerModel,
    prompt: Option<&ContinuousPrompt>,
    examples: &[Prompted],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let d = model.config().hidden_dim;
    let mut out = Vec::with_capacity(examples.len());
    for rows in sequential_batches(examples.len(), batch_size) {
        let refs: Vec<&Prompted> = rows.iter().map(|&i| &examples[i]).collect();
        let batch = prompt_batch(&refs)?;
        let mut tape = Tape::new();
        let enc = ptuning_forward(model, &mut tape, &batch, prompt, Mode::Eval)?;
        let h = mask_hiddens(model, &mut tape, &enc, &batch)?;
        out.extend(tape.data(h).chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Epoch-at-a-time few-shot training state.
#[derive(Debug)]
pub struct FewShotTrainer {
    method: FewShotMethod,
    model: TransformerModel,
    prompt: Option<ContinuousPrompt>,
    verbalizer: Option<Verbalizer>,
    num_classes: usize,
    cfg: FewShotConfig,
    state: AdamState,
    prompt_state: Option<AdamState>,
    rng: Rng,
}

impl FewShotTrainer {
    /// Validates the setup against `examples` and `labels`. P-Tuning is PET
    /// with a continuous prompt; the template must then contain prompt slots.
    pub fn new(
        method: FewShotMethod,
        mut model: TransformerModel,
        prompt: Option<ContinuousPrompt>,
        verbalizer: Option<Verbalizer>,
        examples: &[Prompted],
        labels: &[usize],
        cfg: &FewShotConfig,
    ) -> Result<Self> {
        if examples.len() != labels.len() || examples.is_empty() {
            return Err(Error::dim("train_fewshot", &[examples.len()], &[labels.len()]));
        }
        let needs_prompt = examples[0].prompt_positions.len();
        match (&prompt, needs_prompt) {
            (None, k) if k > 0 => return Err(Error::Template(format!("template has {k} prompt slots but no prompt was given"))),
            (Some(p), k) if p.len() != k => return Err(Error::dim("prompt", &[p.len()], &[k])),
            _ => {}
        }
        if method == FewShotMethod::PTuning && prompt.is_none() {
            return Err(Error::Template("P-Tuning needs a template with prompt slots".into()));
        }
        if method != FewShotMethod::Cp && verbalizer.is_none() {
            return Err(Error::Label("cloze training needs a verbalizer".into()));
        }
        let num_classes = class_count(labels, verbalizer.as_ref());
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Index(format!("label {bad} outside {num_classes} classes")));
        }
        if cfg.freeze_backbone {
            model.set_trainable(false);
        }
        let adam = AdamConfig::with_lr(cfg.learning_rate);
        Ok(FewShotTrainer {
            method,
            state: AdamState::new(model.params(), adam),
            prompt_state: prompt.as_ref().map(|p| AdamState::new(p.store(), adam)),
            model,
            prompt,
            verbalizer,
            num_classes,
            cfg: cfg.clone(),
            rng: Rng::new(cfg.seed),
        })
    }

    /// One shuffled pass; returns the mean batch loss. Contrastive training
    /// skips single-example batches.
    pub fn epoch(&mut self, examples: &[Prompted], labels: &[usize]) -> Result<f64> {
        let batches = shuffled_batches(examples.len(), self.cfg.batch_size, &mut self.rng);
        let mut total = 0.0;
        let mut counted = 0;
        for rows in &batches {
            if self.method == FewShotMethod::Cp && rows.len() < 2 {
                continue;
            }
            let refs: Vec<&Prompted> = rows.iter().map(|&i| &examples[i]).collect();
            let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
            let batch = prompt_batch(&refs)?;
            let mut tape = Tape::new();
            let enc = ptuning_forward(&self.model, &mut tape, &batch, self.prompt.as_ref(), Mode::Train(&mut self.rng))?;
            let h = mask_hiddens(&self.model, &mut tape, &enc, &batch)?;
            let loss = match self.method {
                FewShotMethod::Cp => cp_tuning_loss(&mut tape, h, &y, self.cfg.cp)?,
                _ => {
                    let logits = pet_class_logits(&self.model, &mut tape, h, self.verbalizer.as_ref().expect("checked"))?;
                    tape.cross_entropy(logits, &y)?
                }
            };
            total += tape.value(loss).item();
            counted += 1;
            let grads = tape.gradients(loss)?;
            drop(tape);
            if !self.cfg.freeze_backbone {
                optimizer_step(&grads, self.model.params_mut(), &mut self.state)?;
            }
            if let (Some(p), Some(s)) = (self.prompt.as_mut(), self.prompt_state.as_mut()) {
                optimizer_step(&grads, p.store_mut(), s)?;
            }
        }
        Ok(total / counted.max(1) as f64)
    }

    /// The classifier as trained so far; contrastive centroids are fitted on
    /// `examples`.
    pub fn snapshot(&self, examples: &[Prompted], labels: &[usize]) -> Result<FewShotModel> {
        let mut model = self.model.clone();
        if self.cfg.freeze_backbone {
            model.set_trainable(true);
        }
        let centroids = if self.method == FewShotMethod::Cp {
            let h = collect_mask_hiddens(&model, self.prompt.as_ref(), examples, self.cfg.batch_size)?;
            Some(cp_fit_centroids(&h, labels, self.num_classes)?)
        } else {
            None
        };
        Ok(FewShotModel {
            method: self.method,
            model,
            prompt: self.prompt.clone(),
            verbalizer: self.verbalizer.clone(),
            centroids,
        })
    }
}

/// Trains with the PET (cloze + verbalizer) or contrastive objective for
/// `cfg.epochs` epochs. Returns the trained model and each epoch's mean loss.
pub fn train_fewshot(
    method: FewShotMethod,
    model: TransformerModel,
    prompt: Option<ContinuousPrompt>,
    verbalizer: Option<Verbalizer>,
    examples: &[Prompted],
    labels: &[usize],
    cfg: &FewShotConfig,
) -> Result<(FewShotModel, Vec<f64>)> {
    let mut trainer = FewShotTrainer::new(method, model, prompt, verbalizer, examples, labels, cfg)?;
    let losses = (0..cfg.epochs).map(|_| trainer.epoch(examples, labels)).collect::<Result<Vec<_>>>()?;
    Ok((trainer.snapshot(examples, labels)?, losses))
}

impl FewShotModel {
    /// Per-class probabilities: softmax over verbalizer logits, or over
    /// centroid cosines for the contrastive classifier.
    pub fn class_probabilities(&self, examples: &[Prompted], batch_size: usize) -> Result<Vec<Vec<f64>>> {
        let hiddens = collect_mask_hiddens(&self.model, self.prompt.as_ref(), examples, batch_size)?;
        match (&self.centroids, &self.verbalizer) {
            (Some(c), _) => {
                let sims = hiddens.iter().map(|h| cp_similarities(c, h)).collect::<Result<Vec<_>>>()?;
                Ok(softmax_rows(&sims.concat(), c.num_classes()))
            }
            (None, Some(v)) => {
                let d = self.model.config().hidden_dim;
                let mut tape = Tape::new();
                let h = tape.constant(Tensor::new(vec![hiddens.len(), d], hiddens.concat())?);
                let logits = pet_class_logits(&self.model, &mut tape, h, v)?;
                Ok(softmax_rows(tape.data(logits), v.num_classes()))
            }
            (None, None) => Err(Error::State("few-shot model has neither centroids nor a verbalizer".into())),
        }
    }

    pub fn predict(&self, examples: &[Prompted], batch_size: usize) -> Result<Vec<usize>> {
        let hiddens = collect_mask_hiddens(&self.model, self.prompt.as_ref(), examples, batch_size)?;
        match (&self.centroids, &self.verbalizer) {
            (Some(c), _) => hiddens.iter().map(|h| cp_predict(c, h)).collect(),
            (None, Some(v)) => {
                let d = self.model.config().hidden_dim;
                let flat: Vec<f64> = hiddens.concat();
                let mut tape = Tape::new();
                let h = tape.constant(Tensor::new(vec![hiddens.len(), d], flat)?);
                let logits = pet_class_logits(&self.model, &mut tape, h, v)?;
                Ok(crate::metrics::argmax_rows(tape.data(logits), v.num_classes()))
            }
            (None, None) => Err(Error::State("few-shot model has neither centroids nor a verbalizer".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_zoo::ModelConfig;
    use crate::testkit::{max_gradient_error, param_gradient_errors, random_tensor};
    use crate::tokenization::build_vocab;
    use proptest::prelude::*;
    use crate::rng::Rng;

    fn vocab() -> Vocabulary {
        build_vocab(&["great movie . it was terrible good bad plot acting"], 1).unwrap()
    }

    fn model(v: &Vocabulary, seed: u64) -> TransformerModel {
        let cfg = ModelConfig {
            vocab_size: v.len(),
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            max_position: 24,
            num_classes: 2,
            num_relations: 0,
            dropout_prob: 0.0,
        };
        TransformerModel::init(&cfg, seed).unwrap()
    }

    #[test]
    fn template_example_encoding() {
        let v = vocab();
        let t: PromptTemplate = "{input} . it was {mask} .".parse().unwrap();
        let p = apply_template(&t, &["great movie"], &v, 32).unwrap();
        let toks: Vec<&str> = p.seq.ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks.join(" "), "[CLS] great movie . it was [MASK] . [SEP]");
        assert_eq!(p.mask_pos, 6);
        assert!(p.prompt_positions.is_empty());
        assert_eq!(t.to_string(), "{input} . it was {mask} .");
    }

    #[test]
    fn template_construction_errors() {
        assert!(matches!("{input} {mask} {mask}".parse::<PromptTemplate>(), Err(Error::Template(_))));
        assert!(matches!("it was {mask}".parse::<PromptTemplate>(), Err(Error::Template(_))));
        assert!(matches!("{input} {p*0} {mask}".parse::<PromptTemplate>(), Err(Error::Template(_))));
        assert!(matches!("{input} {what} {mask}".parse::<PromptTemplate>(), Err(Error::Template(_))));
        assert!(ContinuousPrompt::from_tensor(Tensor::zeros(&[0, 8])).is_err());
        let t: PromptTemplate = "{input} {input} {mask}".parse().unwrap();
        assert!(matches!(apply_template(&t, &["a"], &vocab(), 16), Err(Error::Template(_))));
        let rec = Record::from_pairs([("sent", "great")]);
        assert!(matches!(apply_template_record(&t, &rec, &["sent", "other"], &vocab(), 16), Err(Error::Template(_))));
    }

    #[test]
    fn prompt_slots_and_truncation() {
        let v = vocab();
        let t: PromptTemplate = "{p*2} {input} {mask} {p*1}".parse().unwrap();
        assert_eq!(t.prompt_len(), 3);
        let p = apply_template(&t, &["great movie plot acting"], &v, 8).unwrap();
        assert_eq!(p.seq.ids.len(), 8);
        assert_eq!(p.prompt_positions, vec![1, 2, 6]);
        assert_eq!(p.seq.ids[p.mask_pos], MASK_ID);
        assert_eq!(v.decode(&p.seq.ids[3..5]).join(" "), "great movie");
        assert!(apply_template(&t, &["x"], &v, 5).is_err());
    }

    #[test]
    fn verbalizer_rules() {
        let v = vocab();
        let verb = Verbalizer::from_words(&["great", "terrible"], &v).unwrap();
        assert_eq!(verb.token_ids(), &[v.id("great"), v.id("terrible")]);
        assert!(matches!(Verbalizer::from_words(&["great", "great"], &v), Err(Error::Label(_))));
        assert!(matches!(Verbalizer::from_words(&["zzz"], &v), Err(Error::Label(_))));
    }

    #[test]
    fn pet_logits_are_verbalizer_columns() {
        let v = vocab();
        let mut m = model(&v, 1);
        let verb = Verbalizer::from_words(&["great", "terrible"], &v).unwrap();
        // Zero embeddings for the label words, biases 5 and 1.
        let (e, b) = (m.token_embeddings_id(), m.mlm_bias_id());
        let d = 8;
        for t in verb.token_ids() {
            m.params_mut().get_mut(e).data_mut()[*t as usize * d..(*t as usize + 1) * d].fill(0.0);
        }
        m.params_mut().get_mut(b).data_mut()[v.id("great") as usize] = 5.0;
        m.params_mut().get_mut(b).data_mut()[v.id("terrible") as usize] = 1.0;
        let t: PromptTemplate = "{input} . it was {mask} .".parse().unwrap();
        let p = apply_template(&t, &["great movie"], &v, 32).unwrap();
        let batch = prompt_batch(&[&p]).unwrap();
        let mut tape = Tape::new();
        let enc = ptuning_forward(&m, &mut tape, &batch, None, Mode::Eval).unwrap();
        let h = mask_hiddens(&m, &mut tape, &enc, &batch).unwrap();
        let logits = pet_class_logits(&m, &mut tape, h, &verb).unwrap();
        assert_eq!(tape.data(logits), &[5.0, 1.0]);
    }

    #[test]
    fn single_class_pet_loss_is_zero() {
        let v = vocab();
        let m = model(&v, 2);
        let verb = Verbalizer::from_words(&["good"], &v).unwrap();
        let t: PromptTemplate = "{input} {mask}".parse().unwrap();
        let p = apply_template(&t, &["bad plot"], &v, 16).unwrap();
        let batch = prompt_batch(&[&p]).unwrap();
        let mut tape = Tape::new();
        let enc = ptuning_forward(&m, &mut tape, &batch, None, Mode::Eval).unwrap();
        let h = mask_hiddens(&m, &mut tape, &enc, &batch).unwrap();
        let logits = pet_class_logits(&m, &mut tape, h, &verb).unwrap();
        let loss = tape.cross_entropy(logits, &[0]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn pet_gradient_touches_only_verbalizer_bias() {
        let v = vocab();
        let mut m = model(&v, 3);
        let verb = Verbalizer::from_words(&["good", "bad"], &v).unwrap();
        let t: PromptTemplate = "{input} it was {mask}".parse().unwrap();
        let p = apply_template(&t, &["great plot"], &v, 16).unwrap();
        let batch = prompt_batch(&[&p]).unwrap();
        let mut tape = Tape::new();
        let enc = ptuning_forward(&m, &mut tape, &batch, None, Mode::Eval).unwrap();
        let h = mask_hiddens(&m, &mut tape, &enc, &batch).unwrap();
        let logits = pet_class_logits(&m, &mut tape, h, &verb).unwrap();
        let loss = tape.cross_entropy(logits, &[1]).unwrap();
        let g = tape.gradients(loss).unwrap();
        drop(tape);
        m.params_mut().zero_grads();
        g.accumulate_into(m.params_mut());
        let bias = m.params().get(m.mlm_bias_id()).grad().unwrap().to_vec();
        for (i, x) in bias.iter().enumerate() {
            assert_eq!(*x != 0.0, verb.token_ids().contains(&(i as u32)), "bias column {i}");
        }
    }

    #[test]
    fn discrete_and_continuous_prompts_agree() {
        let v = vocab();
        let m = model(&v, 4);
        let words = ["it", "was"];
        let ids: Vec<u32> = words.iter().map(|w| v.id(w)).collect();
        let discrete: PromptTemplate = "{input} it was {mask} .".parse().unwrap();
        let cont: PromptTemplate = "{input} {p*2} {mask} .".parse().unwrap();
        let prompt = ContinuousPrompt::from_tokens(&m, &ids).unwrap();
        let a = apply_template(&discrete, &["great movie"], &v, 16).unwrap();
        let b = apply_template(&cont, &["great movie"], &v, 16).unwrap();
        let (ba, bb) = (prompt_batch(&[&a]).unwrap(), prompt_batch(&[&b]).unwrap());
        let mut t1 = Tape::new();
        let e1 = ptuning_forward(&m, &mut t1, &ba, None, Mode::Eval).unwrap();
        let mut t2 = Tape::new();
        let e2 = ptuning_forward(&m, &mut t2, &bb, Some(&prompt), Mode::Eval).unwrap();
        for (x, y) in t1.data(e1.hidden).iter().zip(t2.data(e2.hidden)) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn ptuning_dimension_mismatch() {
        let v = vocab();
        let m = model(&v, 5);
        let t: PromptTemplate = "{input} {p*2} {mask}".parse().unwrap();
        let p = apply_template(&t, &["good"], &v, 16).unwrap();
        let batch = prompt_batch(&[&p]).unwrap();
        let prompt = ContinuousPrompt::random(3, 8, 1).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(ptuning_forward(&m, &mut tape, &batch, Some(&prompt), Mode::Eval), Err(Error::Dimension { .. })));
    }

    #[test]
    fn prompt_gradient_matches_finite_differences() {
        let v = vocab();
        let m = model(&v, 6);
        let t: PromptTemplate = "{p*2} {input} {mask}".parse().unwrap();
        let verb = Verbalizer::from_words(&["good", "bad"], &v).unwrap();
        let ex = [
            apply_template(&t, &["great movie"], &v, 16).unwrap(),
            apply_template(&t, &["terrible plot acting"], &v, 16).unwrap(),
        ];
        let mut prompt = ContinuousPrompt::random(2, 8, 9).unwrap();
        let pid = prompt.param_id();
        for x in prompt.store_mut().get_mut(pid).data_mut() {
            *x *= 20.0;
        }
        let refs: Vec<&Prompted> = ex.iter().collect();
        let batch = prompt_batch(&refs).unwrap();
        let errs = param_gradient_errors(&mut prompt, |p| p.store_mut(), |tape, p| {
            let enc = ptuning_forward(&m, tape, &batch, Some(p), Mode::Eval)?;
            let h = mask_hiddens(&m, tape, &enc, &batch)?;
            let logits = pet_class_logits(&m, tape, h, &verb)?;
            tape.cross_entropy(logits, &[0, 1])
        })
        .unwrap();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].1 < 1e-6, "{errs:?}");
    }

    #[test]
    fn frozen_backbone_moves_only_prompt() {
        let v = vocab();
        let m = model(&v, 7);
        let before = m.params().clone();
        let t: PromptTemplate = "{p*2} {input} {mask}".parse().unwrap();
        let verb = Verbalizer::from_words(&["good", "bad"], &v).unwrap();
        let ex = vec![
            apply_template(&t, &["great movie"], &v, 16).unwrap(),
            apply_template(&t, &["terrible plot"], &v, 16).unwrap(),
        ];
        let prompt = ContinuousPrompt::random(2, 8, 2).unwrap();
        let p0 = prompt.rows().clone();
        let cfg = FewShotConfig { epochs: 2, freeze_backbone: true, ..Default::default() };
        let (fm, _) = train_fewshot(FewShotMethod::PTuning, m, Some(prompt), Some(verb), &ex, &[0, 1], &cfg).unwrap();
        for ((_, a), (_, b)) in fm.model.params().iter().zip(before.iter()) {
            assert_eq!(a.data(), b.data());
        }
        assert_ne!(fm.prompt.unwrap().rows().data(), p0.data());
    }

    fn cp_value(h: &[Vec<f64>], labels: &[usize], cfg: CpConfig) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(h).unwrap());
        let l = cp_tuning_loss(&mut tape, x, labels, cfg).unwrap();
        tape.value(l).item()
    }

    /// Straight-line evaluation of the formula.
    fn cp_oracle(h: &[Vec<f64>], labels: &[usize], cfg: CpConfig) -> f64 {
        let n = h.len();
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let mut total = 0.0;
        for i in 0..n {
            let pos: Vec<f64> = (0..n)
                .filter(|&j| j != i && labels[j] == labels[i])
                .map(|j| (cfg.m_pos - cos(&h[i], &h[j])).max(0.0))
                .collect();
            let neg: Vec<f64> = (0..n)
                .filter(|&j| labels[j] != labels[i])
                .map(|j| (cos(&h[i], &h[j]) - cfg.m_neg).max(0.0))
                .collect();
            if !pos.is_empty() {
                total += pos.iter().sum::<f64>() / pos.len() as f64;
            }
            if !neg.is_empty() {
                total += cfg.cost * neg.iter().sum::<f64>() / neg.len() as f64;
            }
        }
        total / n as f64
    }

    #[test]
    fn cp_loss_examples() {
        let cfg = CpConfig::default();
        let sep = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        assert_eq!(cp_value(&sep, &[0, 0, 1, 1], cfg), 0.0);
        // cos = 0.5
        let pair = vec![vec![1.0, 0.0], vec![0.5, 0.75f64.sqrt()]];
        assert!((cp_value(&pair, &[0, 1], cfg) - 0.8).abs() < 1e-12);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        assert!(matches!(cp_tuning_loss(&mut tape, x, &[0], cfg), Err(Error::Domain(_))));
        let bad = CpConfig { m_pos: 0.1, m_neg: 0.5, cost: 2.0 };
        let x = tape.constant(Tensor::from_rows(&pair).unwrap());
        assert!(matches!(cp_tuning_loss(&mut tape, x, &[0, 1], bad), Err(Error::Config(_))));
    }

    #[test]
    fn cp_loss_gradient() {
        let mut rng = Rng::new(11);
        for _ in 0..5 {
            let x = random_tensor(&mut rng, &[6, 4], 1.0);
            let labels = [0, 1, 2, 0, 1, 1];
            let err = max_gradient_error(&[x], |tape, v| cp_tuning_loss(tape, v[0], &labels, CpConfig { m_pos: 0.8, m_neg: 0.2, cost: 1.5 }))
                .unwrap();
            assert!(err < 1e-6, "{err:e}");
        }
    }

    #[test]
    fn pet_and_cp_backbone_gradients() {
        let v = vocab();
        let mut m = model(&v, 8);
        let mut rng = Rng::new(3);
        let ids: Vec<_> = m.params().ids().collect();
        for id in ids {
            let shape = m.params().get(id).shape().to_vec();
            let noise = random_tensor(&mut rng, &shape, 0.3);
            for (x, n) in m.params_mut().get_mut(id).data_mut().iter_mut().zip(noise.data()) {
                *x += n;
            }
        }
        let t: PromptTemplate = "{input} it was {mask}".parse().unwrap();
        let verb = Verbalizer::from_words(&["good", "bad"], &v).unwrap();
        let ex: Vec<Prompted> = ["great movie", "bad plot", "good acting", "terrible"]
            .iter()
            .map(|s| apply_template(&t, &[s], &v, 16).unwrap())
            .collect();
        let refs: Vec<&Prompted> = ex.iter().collect();
        let batch = prompt_batch(&refs).unwrap();
        let labels = [0, 1, 0, 1];
        for cp in [false, true] {
            let errs = param_gradient_errors(&mut m, |m| m.params_mut(), |tape, m| {
                let enc = ptuning_forward(m, tape, &batch, None, Mode::Eval)?;
                let h = mask_hiddens(m, tape, &enc, &batch)?;
                if cp {
                    cp_tuning_loss(tape, h, &labels, CpConfig { m_pos: 1.0, m_neg: 0.0, cost: 1.0 })
                } else {
                    let logits = pet_class_logits(m, tape, h, &verb)?;
                    tape.cross_entropy(logits, &labels)
                }
            })
            .unwrap();
            for (name, e) in errs {
                assert!(e < 1e-6, "cp={cp} {name}: {e:e}");
            }
        }
    }

    #[test]
    fn centroid_rules() {
        let h = vec![vec![3.0, 0.0], vec![0.0, 2.0]];
        let c = cp_fit_centroids(&h, &[0, 1], 2).unwrap();
        assert_eq!(c.rows(), &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(cp_predict(&c, &h[1]).unwrap(), 1);
        assert_eq!(cp_predict(&c, &[1.0, 1.0]).unwrap(), 0);
        // Symmetric clusters around the axes.
        let h = vec![vec![1.0, 1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![-1.0, -1.0]];
        let c = cp_fit_centroids(&h, &[0, 0, 1, 1], 2).unwrap();
        assert!((c.rows()[0][0] - 1.0).abs() < 1e-15 && c.rows()[0][1].abs() < 1e-15);
        assert!((c.rows()[1][0] + 1.0).abs() < 1e-15 && c.rows()[1][1].abs() < 1e-15);
        assert!(matches!(cp_fit_centroids(&h, &[0, 0, 0, 0], 2), Err(Error::Domain(_))));
    }

    #[test]
    fn k_shot_sampling() {
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let s = sample_k_shot(&labels, 2, 16, 42).unwrap();
        assert_eq!(s.len(), 32);
        assert_eq!(s.iter().filter(|&&i| labels[i] == 0).count(), 16);
        assert_eq!(s, sample_k_shot(&labels, 2, 16, 42).unwrap());
        assert!(sample_k_shot(&labels, 2, 21, 42).is_err());
    }

    #[test]
    fn cp_training_separates_sixteen_shot_fixture() {
        let v = vocab();
        let m = model(&v, 9);
        let t: PromptTemplate = "{input} it was {mask}".parse().unwrap();
        let pools = [["great", "good", "acting"], ["terrible", "bad", "plot"]];
        let mut rng = Rng::new(5);
        let mut ex = Vec::new();
        let mut labels = Vec::new();
        for i in 0..32 {
            let c = i % 2;
            let words: Vec<&str> = (0..3).map(|_| pools[c][rng.below(3)]).collect();
            ex.push(apply_template(&t, &[&words.join(" ")], &v, 16).unwrap());
            labels.push(c);
        }
        let cfg = FewShotConfig { epochs: 30, learning_rate: 3e-3, ..Default::default() };
        let (fm, losses) = train_fewshot(FewShotMethod::Cp, m, None, None, &ex, &labels, &cfg).unwrap();
        assert!(losses.last().unwrap() < &losses[0]);
        assert_eq!(fm.predict(&ex, 8).unwrap(), labels);
    }

    proptest! {
        #[test]
        fn cp_loss_matches_oracle_and_invariances(
            rows in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 3), 3..7),
            scale in 0.1f64..10.0,
            seed in 0u64..1000,
        ) {
            let n = rows.len();
            prop_assume!(rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let cfg = CpConfig::default();
            let base = cp_value(&rows, &labels, cfg);
            prop_assert!((base - cp_oracle(&rows, &labels, cfg)).abs() < 1e-12);
            let mut scaled = rows.clone();
            scaled[0].iter_mut().for_each(|x| *x *= scale);
            prop_assert!((cp_value(&scaled, &labels, cfg) - base).abs() < 1e-12);
            let mut order: Vec<usize> = (0..n).collect();
            Rng::new(seed).shuffle(&mut order);
            let perm_rows: Vec<Vec<f64>> = order.iter().map(|&i| rows[i].clone()).collect();
            let perm_labels: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
            prop_assert!((cp_value(&perm_rows, &perm_labels, cfg) - base).abs() < 1e-12);
        }
    }
}
