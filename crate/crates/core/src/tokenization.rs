//! Whitespace-and-punctuation tokenizer, vocabulary, MLM masking and padding.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
pub const MASK_ID: u32 = 4;
pub const NUM_SPECIAL: u32 = 5;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// MLM label for positions that are not predicted.
pub const IGNORE_INDEX: i64 = -100;

pub fn is_special(id: u32) -> bool {
    id < NUM_SPECIAL
}

/// Splits text into lowercase tokens.
///
/// Whitespace separates tokens, every ASCII punctuation character is a token
/// of its own, and the literal special tokens (`[MASK]`, `[SEP]`, ...) are
/// kept intact.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if c == '[' {
            if let Some(sp) = SPECIAL_TOKENS.iter().find(|s| rest.starts_with(**s)) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(sp.to_string());
                rest = &rest[sp.len()..];
                continue;
            }
        }
        if c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if c.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(c.to_string());
        } else {
            cur.extend(c.to_lowercase());
        }
        rest = &rest[c.len_utf8()..];
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Bidirectional token/id map. Ids 0–4 are always the special tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list whose first five entries
    /// must be the special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..5].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::Validation(format!(
                "vocabulary must start with {}",
                SPECIAL_TOKENS.join(" ")
            )));
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token: tokens,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id of `token`, or `[UNK]`.
    pub fn id(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    /// Ids of the tokens of `text` with no [CLS]/[SEP] wrapping.
    pub fn ids_of(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        Self::from_tokens(tokens)
    }

    /// Tokens of `ids` without [CLS], [SEP] and [PAD].
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&i| !matches!(i, PAD_ID | CLS_ID | SEP_ID))
            .map(|&i| self.token(i).unwrap_or("[UNK]").to_string())
            .collect()
    }
}

/// Counts tokens over `corpus` and keeps those seen at least `min_freq` times,
/// ordered by descending frequency then lexicographically.
pub fn build_vocab<S: AsRef<str>>(corpus: &[S], min_freq: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::Domain("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for line in corpus {
        for tok in tokenize(line.as_ref()) {
            if !SPECIAL_TOKENS.contains(&tok.as_str()) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(kept.into_iter().map(|(t, _)| t));
    Vocabulary::from_tokens(tokens)
}

/// Half-open token range `[start, end)` naming a knowledge-base entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub entity: String,
}

/// Encoded sequence, `[CLS] … [SEP]`, with optional entity annotations.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub entity_spans: Vec<EntitySpan>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Truncates to `max_len` keeping a final [SEP]. Spans that would extend
    /// into the cut region are dropped.
    pub fn truncate(&mut self, max_len: usize) {
        if self.ids.len() <= max_len {
            return;
        }
        self.ids.truncate(max_len.saturating_sub(1));
        self.ids.push(SEP_ID);
        let limit = max_len.saturating_sub(1);
        self.entity_spans.retain(|s| s.end <= limit);
    }

    fn spans_valid(&self) -> bool {
        let mut prev_end = 0;
        self.entity_spans.iter().all(|s| {
            let ok = s.start < s.end && s.end <= self.ids.len() && s.start >= prev_end;
            prev_end = s.end;
            ok
        })
    }
}

/// Encodes `text` as `[CLS] tokens [SEP]`, truncated to `max_len`.
pub fn encode(vocab: &Vocabulary, text: &str, max_len: usize) -> TokenSequence {
    let max_len = max_len.max(2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(tokenize(text).iter().take(max_len - 2).map(|t| vocab.id(t)));
    ids.push(SEP_ID);
    TokenSequence {
        ids,
        entity_spans: Vec::new(),
    }
}

/// Whole-token, case-folded entity matcher.
///
/// Entities whose surface form contains an out-of-vocabulary token can never
/// match. Matching scans left to right; at each position the longest entity
/// wins and matches never overlap.
#[derive(Debug, Clone)]
pub struct EntityMatcher {
    patterns: Vec<(Vec<u32>, String)>,
}

impl EntityMatcher {
    pub fn new<'a>(vocab: &Vocabulary, entities: impl IntoIterator<Item = &'a str>) -> Self {
        let mut patterns: Vec<(Vec<u32>, String)> = entities
            .into_iter()
            .filter_map(|name| {
                let toks = tokenize(name);
                let ids: Option<Vec<u32>> = toks.iter().map(|t| vocab.get(t)).collect();
                ids.filter(|ids| !ids.is_empty() && ids.iter().all(|&i| !is_special(i)))
                    .map(|ids| (ids, name.to_string()))
            })
            .collect();
        // Longest first, then by name for determinism.
        patterns.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.1.cmp(&b.1)));
        patterns.dedup_by(|a, b| a.0 == b.0);
        EntityMatcher { patterns }
    }

    /// Non-overlapping matches over `ids` as spans.
    pub fn find(&self, ids: &[u32]) -> Vec<EntitySpan> {
        let mut spans = Vec::new();
        let mut i = 0;
        while i < ids.len() {
            let hit = self
                .patterns
                .iter()
                .find(|(p, _)| ids.len() - i >= p.len() && ids[i..i + p.len()] == p[..]);
            match hit {
                Some((p, name)) => {
                    spans.push(EntitySpan {
                        start: i,
                        end: i + p.len(),
                        entity: name.clone(),
                    });
                    i += p.len();
                }
                None => i += 1,
            }
        }
        spans
    }

    /// Replaces the spans of `seq` with the matches found in its ids.
    pub fn annotate(&self, seq: &mut TokenSequence) {
        seq.entity_spans = self.find(&seq.ids);
        debug_assert!(seq.spans_valid());
    }
}

/// Encodes and annotates entity spans after truncation.
pub fn encode_with_entities(vocab: &Vocabulary, text: &str, max_len: usize, matcher: &EntityMatcher) -> TokenSequence {
    let mut seq = encode(vocab, text, max_len);
    matcher.annotate(&mut seq);
    seq
}

/// Replacement policy for positions selected by MLM masking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MlmScheme {
    pub mask_prob: f64,
    /// Share of selected positions replaced by [MASK].
    pub mask_share: f64,
    /// Share replaced by a random non-special token; the rest stay unchanged.
    pub random_share: f64,
}

impl MlmScheme {
    pub fn bert(mask_prob: f64) -> Self {
        MlmScheme {
            mask_prob,
            mask_share: 0.8,
            random_share: 0.1,
        }
    }
}

/// BERT-style masking with the default 80/10/10 replacement split.
///
/// Draw order per non-special position: one `next_f64` for selection; if
/// selected, one `next_f64` for the replacement branch, and one `below` for
/// the random token when that branch is taken.
pub fn apply_mlm_masking(seq: &TokenSequence, vocab_size: usize, mask_prob: f64, rng_seed: u64) -> (Vec<u32>, Vec<i64>) {
    let mut rng = Rng::new(rng_seed);
    apply_mlm_masking_with(seq, vocab_size, MlmScheme::bert(mask_prob), &mut rng)
}

pub fn apply_mlm_masking_with(seq: &TokenSequence, vocab_size: usize, scheme: MlmScheme, rng: &mut Rng) -> (Vec<u32>, Vec<i64>) {
    let mut ids = seq.ids.clone();
    let mut labels = vec![IGNORE_INDEX; ids.len()];
    let random_pool = vocab_size.saturating_sub(NUM_SPECIAL as usize);
    for (i, id) in ids.iter_mut().enumerate() {
        if is_special(*id) {
            continue;
        }
        if rng.next_f64() >= scheme.mask_prob {
            continue;
        }
        labels[i] = *id as i64;
        let branch = rng.next_f64();
        if branch < scheme.mask_share {
            *id = MASK_ID;
        } else if branch < scheme.mask_share + scheme.random_share && random_pool > 0 {
            *id = NUM_SPECIAL + rng.below(random_pool) as u32;
        }
    }
    (ids, labels)
}

/// Per-task targets attached to a [`Batch`].
#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    None,
    Classes(Vec<usize>),
    /// `[n×L]` targets, [`IGNORE_INDEX`] where nothing is predicted.
    Mlm(Vec<i64>),
}

/// Padded `[n×L]` batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub len: usize,
    pub input_ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    pub labels: Labels,
}

impl Batch {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.input_ids[i * self.len..(i + 1) * self.len]
    }

    pub fn mask_row(&self, i: usize) -> &[u8] {
        &self.attention_mask[i * self.len..(i + 1) * self.len]
    }
}

/// Pads every sequence to the longest one, or to `pad_to` when given.
pub fn pad_batch(seqs: &[TokenSequence], pad_to: Option<usize>) -> Result<Batch> {
    let ids: Vec<&[u32]> = seqs.iter().map(|s| s.ids.as_slice()).collect();
    pad_id_rows(&ids, pad_to)
}

pub(crate) fn pad_id_rows(rows: &[&[u32]], pad_to: Option<usize>) -> Result<Batch> {
    if rows.is_empty() {
        return Err(Error::Domain("cannot pad an empty batch".into()));
    }
    let longest = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let len = match pad_to {
        Some(p) if p < longest => {
            return Err(Error::Domain(format!("sequence of length {longest} exceeds pad_to {p}")));
        }
        Some(p) => p,
        None => longest,
    };
    let mut input_ids = Vec::with_capacity(rows.len() * len);
    let mut attention_mask = Vec::with_capacity(rows.len() * len);
    for r in rows {
        input_ids.extend_from_slice(r);
        input_ids.extend(std::iter::repeat_n(PAD_ID, len - r.len()));
        attention_mask.extend(r.iter().map(|&i| u8::from(i != PAD_ID)));
        attention_mask.extend(std::iter::repeat_n(0, len - r.len()));
    }
    Ok(Batch {
        n: rows.len(),
        len,
        input_ids,
        attention_mask,
        labels: Labels::None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ab_vocab() -> Vocabulary {
        build_vocab(&["a b", "a"], 1).unwrap()
    }

    #[test]
    fn tokenize_splits_punctuation_and_keeps_specials() {
        assert_eq!(tokenize("Hello, World!"), vec!["hello", ",", "world", "!"]);
        assert_eq!(tokenize("paris is [MASK]."), vec!["paris", "is", "[MASK]", "."]);
        assert!(tokenize("   ").is_empty());
    }

    #[test]
    fn build_vocab_orders_by_frequency() {
        let v = ab_vocab();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a"), 5);
        assert_eq!(v.id("b"), 6);
        assert_eq!(v.token(0), Some("[PAD]"));
        assert_eq!(v.token(4), Some("[MASK]"));
    }

    #[test]
    fn build_vocab_high_min_freq_keeps_specials_only() {
        let v = build_vocab(&["a b", "a"], 10).unwrap();
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn build_vocab_deterministic_and_rejects_empty() {
        assert_eq!(ab_vocab(), ab_vocab());
        assert!(build_vocab::<&str>(&[], 1).is_err());
    }

    #[test]
    fn encode_examples() {
        let v = ab_vocab();
        assert_eq!(encode(&v, "", 8).ids, vec![2, 3]);
        assert_eq!(encode(&v, "a b", 8).ids, vec![2, 5, 6, 3]);
        assert_eq!(encode(&v, "zzz", 8).ids, vec![2, 1, 3]);
    }

    #[test]
    fn encode_truncates_keeping_sep() {
        let v = ab_vocab();
        let s = encode(&v, "a b a b a", 4);
        assert_eq!(s.ids, vec![2, 5, 6, 3]);
    }

    #[test]
    fn decode_inverts_encode_in_vocab() {
        let v = ab_vocab();
        let s = encode(&v, "A b a", 16);
        assert_eq!(v.decode(&s.ids), vec!["a", "b", "a"]);
    }

    #[test]
    fn vocab_file_roundtrip() {
        let v = ab_vocab();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("[PAD]\n[UNK]\n[CLS]\n[SEP]\n[MASK]\na\nb\n"));
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    #[test]
    fn mask_prob_zero_is_identity() {
        let v = ab_vocab();
        let s = encode(&v, "a b a b", 16);
        let (ids, labels) = apply_mlm_masking(&s, v.len(), 0.0, 1);
        assert_eq!(ids, s.ids);
        assert!(labels.iter().all(|&l| l == IGNORE_INDEX));
    }

    #[test]
    fn forced_mask_branch_masks_everything() {
        let v = ab_vocab();
        let s = encode(&v, "a b a b", 16);
        let scheme = MlmScheme {
            mask_prob: 1.0,
            mask_share: 1.0,
            random_share: 0.0,
        };
        let (ids, labels) = apply_mlm_masking_with(&s, v.len(), scheme, &mut Rng::new(0));
        assert_eq!(ids, vec![2, 4, 4, 4, 4, 3]);
        assert_eq!(labels, vec![-100, 5, 6, 5, 6, -100]);
    }

    #[test]
    fn pad_batch_examples() {
        let a = TokenSequence {
            ids: vec![2, 5, 3],
            ..Default::default()
        };
        let b = TokenSequence {
            ids: vec![2, 5, 6, 5, 3],
            ..Default::default()
        };
        let batch = pad_batch(&[a.clone(), b.clone()], None).unwrap();
        assert_eq!(batch.len, 5);
        assert_eq!(batch.mask_row(0), &[1, 1, 1, 0, 0]);
        assert_eq!(batch.mask_row(1), &[1, 1, 1, 1, 1]);
        let single = pad_batch(std::slice::from_ref(&a), None).unwrap();
        assert_eq!(single.len, 3);
        assert!(pad_batch(&[b], Some(4)).is_err());
        assert!(pad_batch(&[], None).is_err());
    }

    #[test]
    fn entity_matcher_non_overlapping_longest_first() {
        let v = build_vocab(&["new york city is in new york state"], 1).unwrap();
        let m = EntityMatcher::new(&v, ["new york", "new york city", "york"]);
        let seq = encode(&v, "new york city is in new york state", 32);
        let spans = m.find(&seq.ids);
        let names: Vec<_> = spans.iter().map(|s| s.entity.as_str()).collect();
        assert_eq!(names, vec!["new york city", "new york"]);
        assert_eq!((spans[0].start, spans[0].end), (1, 4));
    }

    #[test]
    fn truncation_drops_crossing_spans() {
        let v = build_vocab(&["x y z w"], 1).unwrap();
        let m = EntityMatcher::new(&v, ["z w", "x"]);
        let mut seq = encode(&v, "x y z w", 16);
        m.annotate(&mut seq);
        assert_eq!(seq.entity_spans.len(), 2);
        seq.truncate(5); // [CLS] x y z [SEP]
        assert_eq!(seq.ids.len(), 5);
        assert_eq!(seq.entity_spans.len(), 1);
        assert_eq!(seq.entity_spans[0].entity, "x");
    }
}
