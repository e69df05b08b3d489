//! Knowledge distillation: augmentation, cached teacher outputs, temperature
//! KD, and meta-distillation from a multi-domain teacher gated by its
//! per-domain expertise.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autograd::{AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor, Var};
use crate::data_hub::{EncodedDataset, Record, Value};
use crate::error::{Error, Result};
use crate::model_zoo::{encode_model, write_atomic, Mode, TransformerModel};
use crate::rng::Rng;
use crate::tokenization::{tokenize, Vocabulary, NUM_SPECIAL, SPECIAL_TOKENS};
use crate::train::{class_probabilities, optimizer_step, sequential_batches, shuffled_batches, train_classifier_epoch};

/// Temperature, hard-loss mix and feature-matching weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdConfig {
    pub temperature: f64,
    pub alpha: f64,
    pub feature_beta: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        KdConfig {
            temperature: 2.0,
            alpha: 0.3,
            feature_beta: 0.1,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.feature_beta >= 0.0) {
            return Err(Error::Config(format!("feature_beta must be ≥ 0, got {}", self.feature_beta)));
        }
        Ok(())
    }
}

const AUG_MASK_P: f64 = 0.1;
const AUG_RANDOM_P: f64 = 0.1;

/// Originals followed by `n_aug` noisy copies of each record. In the copies,
/// every token of the `text_columns` becomes [MASK] with probability 0.1 or a
/// uniformly drawn non-special vocabulary token with probability 0.1 (one
/// draw decides per token). Other columns are copied.
pub fn augment_records(records: &[Record], text_columns: &[&str], vocab: &Vocabulary, n_aug: usize, seed: u64) -> Result<Vec<Record>> {
    let mut rng = Rng::new(seed);
    let mut out = records.to_vec();
    let v = vocab.len() as u32;
    for rec in records {
        for _ in 0..n_aug {
            let mut copy = rec.clone();
            for col in text_columns {
                let text = rec.text(col)?;
                let words: Vec<String> = tokenize(text)
                    .into_iter()
                    .map(|w| {
                        let r = rng.next_f64();
                        if r < AUG_MASK_P {
                            SPECIAL_TOKENS[4].to_string()
                        } else if r < AUG_MASK_P + AUG_RANDOM_P && v > NUM_SPECIAL {
                            let id = rng.below((v - NUM_SPECIAL) as usize) as u32 + NUM_SPECIAL;
                            vocab.token(id).expect("id in range").to_string()
                        } else {
                            w
                        }
                    })
                    .collect();
                copy.values.insert(col.to_string(), Value::Str(words.join(" ")));
            }
            out.push(copy);
        }
    }
    Ok(out)
}

/// Teacher logits and pooled feature for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub logits: Vec<f64>,
    pub feature: Vec<f64>,
}

/// Teacher outputs per example id, tagged with a hash of the teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherCache {
    pub teacher_hash: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    entries: BTreeMap<u64, CacheEntry>,
}

pub const CACHE_MAGIC: &[u8; 7] = b"ENLPTC1";

/// Hex SHA-256 of the serialized teacher (config and weights).
pub fn teacher_hash(teacher: &TransformerModel) -> String {
    let digest = Sha256::digest(encode_model(teacher));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl TeacherCache {
    pub fn new(teacher_hash: String, num_classes: usize, feature_dim: usize) -> Self {
        TeacherCache {
            teacher_hash,
            num_classes,
            feature_dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: u64, entry: CacheEntry) -> Result<()> {
        if entry.logits.len() != self.num_classes || entry.feature.len() != self.feature_dim {
            return Err(Error::Cache(format!(
                "entry {id} has {} logits and {} features; cache holds {} and {}",
                entry.logits.len(),
                entry.feature.len(),
                self.num_classes,
                self.feature_dim
            )));
        }
        if self.entries.insert(id, entry).is_some() {
            return Err(Error::Cache(format!("duplicate example id {id}")));
        }
        Ok(())
    }

    pub fn get(&self, id: u64) -> Result<&CacheEntry> {
        self.entries
            .get(&id)
            .ok_or_else(|| Error::Cache(format!("no cached teacher output for example {id}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, &CacheEntry)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    /// Errors unless the cache was built by `teacher`.
    pub fn check_teacher(&self, teacher: &TransformerModel) -> Result<()> {
        let h = teacher_hash(teacher);
        if h != self.teacher_hash {
            return Err(Error::Cache(format!("cache was built by teacher {} but the teacher is now {h}", self.teacher_hash)));
        }
        Ok(())
    }

    /// Binary form: magic, hash, then per entry id, K, logits, d, feature
    /// (little-endian, values as f32).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = CACHE_MAGIC.to_vec();
        out.extend((self.teacher_hash.len() as u32).to_le_bytes());
        out.extend(self.teacher_hash.as_bytes());
        out.extend((self.entries.len() as u64).to_le_bytes());
        for (id, e) in &self.entries {
            out.extend(id.to_le_bytes());
            out.extend((e.logits.len() as u32).to_le_bytes());
            out.extend(e.logits.iter().flat_map(|&x| (x as f32).to_le_bytes()));
            out.extend((e.feature.len() as u32).to_le_bytes());
            out.extend(e.feature.iter().flat_map(|&x| (x as f32).to_le_bytes()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(CACHE_MAGIC.len())? != CACHE_MAGIC {
            return Err(Error::Format("not a teacher cache (bad magic)".into()));
        }
        let hlen = r.u32()? as usize;
        let hash = String::from_utf8(r.take(hlen)?.to_vec()).map_err(|_| Error::Format("teacher hash is not UTF-8".into()))?;
        let count = r.u64()?;
        let mut cache: Option<TeacherCache> = None;
        for _ in 0..count {
            let id = r.u64()?;
            let k = r.u32()? as usize;
            let logits = r.f32s(k)?;
            let d = r.u32()? as usize;
            let feature = r.f32s(d)?;
            let c = cache.get_or_insert_with(|| TeacherCache::new(hash.clone(), k, d));
            c.insert(id, CacheEntry { logits, feature })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after teacher cache".into()));
        }
        Ok(cache.unwrap_or_else(|| TeacherCache::new(hash, 0, 0)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    /// Loads a cache and rejects it unless it was built by `teacher`.
    pub fn load(path: &Path, teacher: &TransformerModel) -> Result<Self> {
        let cache = Self::from_bytes(&std::fs::read(path)?)?;
        cache.check_teacher(teacher)?;
        Ok(cache)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("truncated teacher cache".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("corrupt length".into()))?)?;
        Ok(raw.chunks(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect())
    }
}

/// Eval-mode logits and pooled features, row `i` of `data` under `ids[i]`.
pub fn extract_teacher_logits(teacher: &TransformerModel, data: &EncodedDataset, ids: &[u64], batch_size: usize) -> Result<TeacherCache> {
    if ids.len() != data.len() {
        return Err(Error::dim("extract_teacher_logits", &[data.len()], &[ids.len()]));
    }
    let (k, d) = (teacher.config().num_classes, teacher.config().hidden_dim);
    let mut cache = TeacherCache::new(teacher_hash(teacher), k, d);
    for rows in sequential_batches(data.len(), batch_size) {
        let batch = data.batch(&rows)?;
        let mut tape = Tape::new();
        let enc = teacher.encode_batch(&mut tape, &batch, Mode::Eval)?;
        let pooled = teacher.pooled(&mut tape, &enc)?;
        let logits = teacher.classify_pooled(&mut tape, pooled)?;
        for (j, &row) in rows.iter().enumerate() {
            cache.insert(
                ids[row],
                CacheEntry {
                    logits: tape.data(logits)[j * k..(j + 1) * k].to_vec(),
                    feature: tape.data(pooled)[j * d..(j + 1) * d].to_vec(),
                },
            )?;
        }
    }
    Ok(cache)
}

fn softmax_t(logits: &[f64], k: usize, t: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|x| x / t).collect();
    crate::train::softmax_rows(&scaled, k).concat()
}

/// `T² · mean_i KL(softmax(teacher_i/T) ‖ softmax(student_i/T))`.
fn soft_term(tape: &mut Tape, student_logits: Var, teacher_logits: &[f64], t: f64) -> Result<Var> {
    let shape = tape.shape(student_logits).to_vec();
    if shape.len() != 2 || teacher_logits.len() != shape[0] * shape[1] {
        return Err(Error::dim("kd soft targets", &shape, &[teacher_logits.len()]));
    }
    let target = softmax_t(teacher_logits, shape[1], t);
    let scaled = tape.scale(student_logits, 1.0 / t)?;
    let kl = tape.kl_div(scaled, &target, None)?;
    tape.scale(kl, t * t)
}

/// `alpha · CE(student, y) + (1 − alpha) · T² · mean KL(teacher_T ‖ student_T)`.
/// Teacher logits are row-major `[n×K]` constants.
pub fn kd_loss(tape: &mut Tape, student_logits: Var, teacher_logits: &[f64], hard: &[usize], cfg: &KdConfig) -> Result<Var> {
    cfg.validate()?;
    let ce = tape.cross_entropy(student_logits, hard)?;
    if cfg.alpha == 1.0 {
        return Ok(ce);
    }
    let soft = soft_term(tape, student_logits, teacher_logits, cfg.temperature)?;
    let a = tape.scale(ce, cfg.alpha)?;
    let b = tape.scale(soft, 1.0 - cfg.alpha)?;
    tape.add(a, b)
}

/// Student-side `[d_s×d_t]` map from student pooled features to the
/// teacher's feature space.
#[derive(Debug, Clone)]
pub struct Projection {
    store: ParamStore,
    id: ParamId,
}

pub const PROJECTION_PARAM: &str = "distill.projection";

impl Projection {
    pub fn new(d_student: usize, d_teacher: usize, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let data = (0..d_student * d_teacher).map(|_| rng.truncated_normal(0.02)).collect();
        Self::from_tensor(Tensor::new(vec![d_student, d_teacher], data)?)
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::dim("projection", t.shape(), &[2]));
        }
        let mut store = ParamStore::new();
        let id = store.insert(PROJECTION_PARAM, t)?;
        Ok(Projection { store, id })
    }

    pub fn matrix(&self) -> &Tensor {
        self.store.get(self.id)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn var(&self, tape: &mut Tape) -> Var {
        tape.param(&self.store, self.id)
    }
}

/// ```text
/// CE(student, y) + t_d · [ (1 − alpha) · T² · KL(teacher_T ‖ student_T)
///                        + feature_beta · MSE(pooled · P, teacher_feature) ]
/// ```
/// `teacher_logits` is `[n×K]` and `teacher_features` `[n×d_t]`, row-major.
#[allow(clippy::too_many_arguments)]
pub fn meta_distill_loss(
    tape: &mut Tape,
    student_logits: Var,
    student_pooled: Var,
    projection: Var,
    teacher_logits: &[f64],
    teacher_features: &[f64],
    hard: &[usize],
    t_d: f64,
    cfg: &KdConfig,
) -> Result<Var> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&t_d) {
        return Err(Error::Config(format!("domain expertise must lie in [0, 1], got {t_d}")));
    }
    let ps = tape.shape(student_pooled).to_vec();
    let pj = tape.shape(projection).to_vec();
    if ps.len() != 2 || pj.len() != 2 || ps[1] != pj[0] {
        return Err(Error::dim("meta_distill projection", &ps, &pj));
    }
    if teacher_features.len() != ps[0] * pj[1] {
        return Err(Error::dim("meta_distill teacher features", &[ps[0], pj[1]], &[teacher_features.len()]));
    }
    let ce = tape.cross_entropy(student_logits, hard)?;
    let soft = soft_term(tape, student_logits, teacher_logits, cfg.temperature)?;
    let soft = tape.scale(soft, 1.0 - cfg.alpha)?;
    let mapped = tape.matmul(student_pooled, projection)?;
    let target = tape.constant(Tensor::new(vec![ps[0], pj[1]], teacher_features.to_vec())?);
    let diff = tape.sub(mapped, target)?;
    let sq = tape.mul(diff, diff)?;
    let mse = tape.mean(sq)?;
    let feat = tape.scale(mse, cfg.feature_beta)?;
    let gated = tape.add(soft, feat)?;
    let gated = tape.scale(gated, t_d)?;
    tape.add(ce, gated)
}

/// Mean feature per `(domain, class)` cell; absent cells are omitted.
pub fn compute_class_prototypes(features: &[Vec<f64>], domains: &[usize], labels: &[usize]) -> Result<BTreeMap<(usize, usize), Vec<f64>>> {
    if features.len() != domains.len() || features.len() != labels.len() {
        return Err(Error::dim("compute_class_prototypes", &[features.len()], &[domains.len(), labels.len()]));
    }
    let mut sums: BTreeMap<(usize, usize), (Vec<f64>, usize)> = BTreeMap::new();
    for ((f, &d), &y) in features.iter().zip(domains).zip(labels) {
        let (s, c) = sums.entry((d, y)).or_insert_with(|| (vec![0.0; f.len()], 0));
        if s.len() != f.len() {
            return Err(Error::dim("compute_class_prototypes", &[s.len()], &[f.len()]));
        }
        for (a, b) in s.iter_mut().zip(f) {
            *a += b;
        }
        *c += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, c))| (k, s.into_iter().map(|x| x / c as f64).collect()))
        .collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Mean over other domains of `(cos(feature, prototype[d', class]) + 1) / 2`.
/// A zero vector on either side counts as cosine 0.
pub fn instance_transfer_weight(
    feature: &[f64],
    own_domain: usize,
    class: usize,
    prototypes: &BTreeMap<(usize, usize), Vec<f64>>,
) -> Result<f64> {
    let others: Vec<f64> = prototypes
        .iter()
        .filter(|((d, c), _)| *d != own_domain && *c == class)
        .map(|(_, p)| (cosine(feature, p) + 1.0) / 2.0)
        .collect();
    if others.is_empty() {
        return Err(Error::Domain(format!("class {class} has no prototype outside domain {own_domain}")));
    }
    Ok((others.iter().sum::<f64>() / others.len() as f64).clamp(0.0, 1.0))
}

/// Transfer weight of every example.
pub fn instance_weights(features: &[Vec<f64>], domains: &[usize], labels: &[usize]) -> Result<Vec<f64>> {
    let protos = compute_class_prototypes(features, domains, labels)?;
    features
        .iter()
        .zip(domains)
        .zip(labels)
        .map(|((f, &d), &y)| instance_transfer_weight(f, d, y, &protos))
        .collect()
}

/// Optimisation settings shared by teacher and student training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            learning_rate: 1e-3,
            seed: 42,
        }
    }
}

/// Trains on the multi-domain union minimising `Σ w_i · CE_i`, with each
/// batch's weights rescaled to mean 1. `weights` must cover every example.
pub fn train_meta_teacher(model: &mut TransformerModel, data: &EncodedDataset, weights: &[f64], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if weights.len() != data.len() {
        return Err(Error::State(format!("{} instance weights for {} examples", weights.len(), data.len())));
    }
    if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
        return Err(Error::State(format!("instance weight {w} outside [0, 1]")));
    }
    let mut state = AdamState::new(model.params(), AdamConfig::with_lr(cfg.learning_rate));
    let mut rng = Rng::new(cfg.seed);
    (0..cfg.epochs)
        .map(|_| train_classifier_epoch(model, &mut state, data, cfg.batch_size, &mut rng, Some(weights)))
        .collect()
}

/// Plain fine-tuning with the same loop and seeding as [`train_meta_teacher`].
pub fn train_teacher(model: &mut TransformerModel, data: &EncodedDataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    let mut state = AdamState::new(model.params(), AdamConfig::with_lr(cfg.learning_rate));
    let mut rng = Rng::new(cfg.seed);
    (0..cfg.epochs)
        .map(|_| train_classifier_epoch(model, &mut state, data, cfg.batch_size, &mut rng, None))
        .collect()
}

/// Eval-mode pooled features of every example, in order.
pub fn pooled_features(model: &TransformerModel, data: &EncodedDataset, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let d = model.config().hidden_dim;
    let mut out = Vec::with_capacity(data.len());
    for rows in sequential_batches(data.len(), batch_size) {
        let batch = data.batch(&rows)?;
        let mut tape = Tape::new();
        let enc = model.encode_batch(&mut tape, &batch, Mode::Eval)?;
        let pooled = model.pooled(&mut tape, &enc)?;
        out.extend(tape.data(pooled).chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Meta-teacher training from scratch: `cfg.epochs` of plain fine-tuning
/// on the union give the features for the class prototypes, then
/// `cfg.epochs` of transfer-weighted training (fresh optimiser, seed + 1)
/// follow. Returns the instance weights used.
pub fn fit_meta_teacher(model: &mut TransformerModel, data: &EncodedDataset, domains: &[usize], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if domains.len() != data.len() {
        return Err(Error::State(format!("{} domain ids for {} examples", domains.len(), data.len())));
    }
    let gold = data
        .all_labels()
        .ok_or_else(|| Error::Label("meta-teacher training needs labelled examples".into()))?;
    train_teacher(model, data, cfg)?;
    let features = pooled_features(model, data, cfg.batch_size.max(1))?;
    let weights = instance_weights(&features, domains, &gold)?;
    train_meta_teacher(model, data, &weights, &TrainConfig { seed: cfg.seed.wrapping_add(1), ..*cfg })?;
    Ok(weights)
}

/// Mean probability the teacher assigns to the gold class.
pub fn domain_expertise(teacher: &TransformerModel, held_out: &EncodedDataset) -> Result<f64> {
    if held_out.is_empty() {
        return Err(Error::Domain("domain expertise of an empty split".into()));
    }
    let gold = held_out
        .all_labels()
        .ok_or_else(|| Error::Label("domain expertise needs labelled examples".into()))?;
    let probs = class_probabilities(teacher, held_out, 32)?;
    Ok(mean_gold_probability(&probs, &gold))
}

pub fn mean_gold_probability(probs: &[Vec<f64>], gold: &[usize]) -> f64 {
    let s: f64 = probs.iter().zip(gold).map(|(p, &g)| p[g]).sum();
    (s / gold.len() as f64).clamp(0.0, 1.0)
}

/// Distillation signal for [`StudentTrainer`].
#[derive(Debug, Clone, Copy)]
pub enum Guidance<'a> {
    /// Temperature KD from a cached teacher.
    Kd { cache: &'a TeacherCache, cfg: KdConfig },
    /// Meta-distillation; `t_d[i]` is the teacher's expertise on the domain
    /// of training row `i`.
    Meta {
        cache: &'a TeacherCache,
        cfg: KdConfig,
        t_d: &'a [f64],
    },
}

impl Guidance<'_> {
    fn cache(&self) -> &TeacherCache {
        match self {
            Guidance::Kd { cache, .. } | Guidance::Meta { cache, .. } => cache,
        }
    }
}

/// Epoch-at-a-time student training. Row `i` of the training data is
/// example `ids[i]` of the teacher cache. The projection is trained
/// alongside for meta-distillation.
#[derive(Debug)]
pub struct StudentTrainer<'a> {
    data: &'a EncodedDataset,
    ids: &'a [u64],
    gold: Vec<usize>,
    guidance: Guidance<'a>,
    cfg: TrainConfig,
    state: AdamState,
    proj_state: Option<AdamState>,
    rng: Rng,
}

impl<'a> StudentTrainer<'a> {
    pub fn new(
        student: &TransformerModel,
        projection: Option<&Projection>,
        data: &'a EncodedDataset,
        ids: &'a [u64],
        guidance: Guidance<'a>,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if ids.len() != data.len() {
            return Err(Error::dim("student ids", &[data.len()], &[ids.len()]));
        }
        let gold = data
            .all_labels()
            .ok_or_else(|| Error::Label("student training needs labelled examples".into()))?;
        let cache = guidance.cache();
        if cache.num_classes != student.config().num_classes {
            return Err(Error::dim("teacher/student classes", &[cache.num_classes], &[student.config().num_classes]));
        }
        for &id in ids {
            cache.get(id)?;
        }
        match (guidance, projection) {
            (Guidance::Meta { .. }, None) => return Err(Error::Config("meta-distillation needs a projection".into())),
            (Guidance::Meta { t_d, .. }, Some(p)) => {
                if t_d.len() != data.len() {
                    return Err(Error::State(format!("{} domain expertise values for {} examples", t_d.len(), data.len())));
                }
                let shape = p.matrix().shape();
                if shape[0] != student.config().hidden_dim || shape[1] != cache.feature_dim {
                    return Err(Error::dim(
                        "projection",
                        shape,
                        &[student.config().hidden_dim, cache.feature_dim],
                    ));
                }
            }
            _ => {}
        }
        let adam = AdamConfig::with_lr(cfg.learning_rate);
        Ok(StudentTrainer {
            data,
            ids,
            gold,
            guidance,
            cfg: *cfg,
            state: AdamState::new(student.params(), adam),
            proj_state: projection.map(|p| AdamState::new(p.store(), adam)),
            rng: Rng::new(cfg.seed),
        })
    }

    /// One shuffled pass; returns the mean batch loss. Under meta-distillation
    /// a batch mixing domains averages the per-domain losses weighted by
    /// their share of the batch.
    pub fn epoch(&mut self, student: &mut TransformerModel, mut projection: Option<&mut Projection>) -> Result<f64> {
        let batches = shuffled_batches(self.data.len(), self.cfg.batch_size, &mut self.rng);
        let cache = self.guidance.cache();
        let mut total = 0.0;
        for rows in &batches {
            let batch = self.data.batch(rows)?;
            let mut tape = Tape::new();
            let enc = student.encode_batch(&mut tape, &batch, Mode::Train(&mut self.rng))?;
            let pooled = student.pooled(&mut tape, &enc)?;
            let logits = student.classify_pooled(&mut tape, pooled)?;
            let loss = match self.guidance {
                Guidance::Kd { cfg, .. } => {
                    let y: Vec<usize> = rows.iter().map(|&i| self.gold[i]).collect();
                    let t: Vec<f64> = rows.iter().map(|&i| Ok(cache.get(self.ids[i])?.logits.clone())).collect::<Result<Vec<_>>>()?.concat();
                    kd_loss(&mut tape, logits, &t, &y, &cfg)?
                }
                Guidance::Meta { cfg, t_d, .. } => {
                    let p = projection.as_ref().ok_or_else(|| Error::Config("meta-distillation needs a projection".into()))?.var(&mut tape);
                    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
                    for (j, &i) in rows.iter().enumerate() {
                        groups.entry(t_d[i].to_bits()).or_default().push(j);
                    }
                    let mut acc: Option<Var> = None;
                    for (bits, members) in groups {
                        let (lg, pl) = if members.len() == rows.len() {
                            (logits, pooled)
                        } else {
                            (tape.gather_rows(logits, &members)?, tape.gather_rows(pooled, &members)?)
                        };
                        let mut tl = Vec::new();
                        let mut tf = Vec::new();
                        let mut y = Vec::new();
                        for &j in &members {
                            let e = cache.get(self.ids[rows[j]])?;
                            tl.extend_from_slice(&e.logits);
                            tf.extend_from_slice(&e.feature);
                            y.push(self.gold[rows[j]]);
                        }
                        let l = meta_distill_loss(&mut tape, lg, pl, p, &tl, &tf, &y, f64::from_bits(bits), &cfg)?;
                        let l = if members.len() == rows.len() {
                            l
                        } else {
                            tape.scale(l, members.len() as f64 / rows.len() as f64)?
                        };
                        acc = Some(match acc {
                            Some(a) => tape.add(a, l)?,
                            None => l,
                        });
                    }
                    acc.expect("non-empty batch")
                }
            };
            total += tape.value(loss).item();
            let grads = tape.gradients(loss)?;
            drop(tape);
            optimizer_step(&grads, student.params_mut(), &mut self.state)?;
            if let (Some(p), Some(s)) = (projection.as_deref_mut(), self.proj_state.as_mut()) {
                optimizer_step(&grads, p.store_mut(), s)?;
            }
        }
        Ok(total / batches.len().max(1) as f64)
    }
}

/// Trains `student` for `cfg.epochs` epochs; returns each epoch's mean loss.
pub fn train_student(
    student: &mut TransformerModel,
    mut projection: Option<&mut Projection>,
    data: &EncodedDataset,
    ids: &[u64],
    guidance: Guidance<'_>,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut trainer = StudentTrainer::new(student, projection.as_deref(), data, ids, guidance, cfg)?;
    (0..cfg.epochs).map(|_| trainer.epoch(student, projection.as_deref_mut())).collect()
}
