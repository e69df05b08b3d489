use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenization::{EntityMatcher, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>) -> Self {
        Triple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }
}

/// Surface text of a relation name: underscores become spaces, so
/// `born_in` reads as the two tokens `born in`.
pub fn relation_surface(relation: &str) -> String {
    relation.replace('_', " ")
}

/// Deduplicated triples with a head index and a dense relation vocabulary.
#[derive(Debug, Clone, Default)]
pub struct TripleStore {
    triples: Vec<Triple>,
    by_head: BTreeMap<String, Vec<usize>>,
    relations: Vec<String>,
    relation_ids: HashMap<String, usize>,
}

impl TripleStore {
    /// Builds a store, dropping duplicates and assigning relation ids in
    /// first-seen order.
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Result<Self> {
        let mut store = TripleStore::default();
        let mut seen = HashSet::new();
        for (i, t) in triples.into_iter().enumerate() {
            if t.head.is_empty() || t.relation.is_empty() || t.tail.is_empty() {
                return Err(Error::Parse(format!("triple {i} has an empty field: {t:?}")));
            }
            if !seen.insert(t.clone()) {
                continue;
            }
            if !store.relation_ids.contains_key(&t.relation) {
                store.relation_ids.insert(t.relation.clone(), store.relations.len());
                store.relations.push(t.relation.clone());
            }
            store.by_head.entry(t.head.clone()).or_default().push(store.triples.len());
            store.triples.push(t);
        }
        Ok(store)
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Triples whose head is `entity`, in insertion order.
    pub fn about(&self, entity: &str) -> impl Iterator<Item = &Triple> {
        self.by_head
            .get(entity)
            .into_iter()
            .flat_map(move |ids| ids.iter().map(move |&i| &self.triples[i]))
    }

    pub fn head_index(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.by_head
    }

    pub fn count_about(&self, entity: &str) -> usize {
        self.by_head.get(entity).map_or(0, Vec::len)
    }

    pub fn heads(&self) -> impl Iterator<Item = &str> {
        self.by_head.keys().map(String::as_str)
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn relation_id(&self, relation: &str) -> Option<usize> {
        self.relation_ids.get(relation).copied()
    }
}

/// Reads JSONL, one `{"head":…,"relation":…,"tail":…}` object per line.
pub fn load_triples(path: &Path) -> Result<TripleStore> {
    let text = fs::read_to_string(path)?;
    parse_triples(&text)
}

pub fn parse_triples(text: &str) -> Result<TripleStore> {
    let mut triples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t: Triple =
            serde_json::from_str(line).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
        if t.head.is_empty() || t.relation.is_empty() || t.tail.is_empty() {
            return Err(Error::Parse(format!("line {}: empty field", i + 1)));
        }
        triples.push(t);
    }
    TripleStore::from_triples(triples)
}

pub fn render_triples(store: &TripleStore) -> String {
    store
        .triples()
        .iter()
        .map(|t| serde_json::to_string(t).expect("triple serializes") + "\n")
        .collect()
}

/// Corpus occurrence counts per entity name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EntityStats {
    pub counts: BTreeMap<String, usize>,
}

impl EntityStats {
    pub fn count(&self, entity: &str) -> usize {
        self.counts.get(entity).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }
}

/// Counts whole-token, case-folded occurrences of each entity across `corpus`,
/// left to right without overlap (longest entity wins at a position).
/// Every requested entity gets an entry, absent ones with 0.
pub fn entity_frequencies<'a>(
    corpus: &[TokenSequence],
    entities: impl IntoIterator<Item = &'a str>,
    vocab: &Vocabulary,
) -> EntityStats {
    let names: Vec<String> = entities.into_iter().map(|e| e.to_lowercase()).collect();
    let matcher = EntityMatcher::new(vocab, names.iter().map(String::as_str));
    let mut counts: BTreeMap<String, usize> = names.iter().map(|n| (n.clone(), 0)).collect();
    for seq in corpus {
        for span in matcher.find(&seq.ids) {
            *counts.entry(span.entity).or_default() += 1;
        }
    }
    EntityStats { counts }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenization::{build_vocab, encode};

    #[test]
    fn dedup_and_relation_order() {
        let text = r#"{"head":"a","relation":"born_in","tail":"x"}
{"head":"b","relation":"born_in","tail":"y"}
{"head":"a","relation":"born_in","tail":"x"}
{"head":"b","relation":"capital_of","tail":"z"}
"#;
        let s = parse_triples(text).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.relation_id("born_in"), Some(0));
        assert_eq!(s.relation_id("capital_of"), Some(1));
        assert_eq!(s.count_about("b"), 2);
        let reparsed = parse_triples(&render_triples(&s)).unwrap();
        assert_eq!(reparsed.triples(), s.triples());
    }

    #[test]
    fn missing_field_is_reported_with_line() {
        let text = "{\"head\":\"a\",\"relation\":\"r\",\"tail\":\"x\"}\n{\"head\":\"a\",\"relation\":\"r\"}\n";
        match parse_triples(text) {
            Err(Error::Parse(msg)) => assert!(msg.starts_with("line 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn head_index_is_consistent() {
        let triples = (0..30).map(|i| Triple::new(format!("e{}", i % 7), format!("r{}", i % 3), format!("t{i}")));
        let s = TripleStore::from_triples(triples).unwrap();
        let mut covered = vec![false; s.len()];
        for (h, ids) in s.head_index() {
            for &i in ids {
                assert_eq!(&s.triples()[i].head, h);
                covered[i] = true;
            }
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn frequencies() {
        let lines = ["paris is big", "i love paris", "paris paris", "rome"];
        let vocab = build_vocab(&lines, 1).unwrap();
        let corpus: Vec<_> = lines[..3].iter().map(|l| encode(&vocab, l, 16)).collect();
        let stats = entity_frequencies(&corpus, ["Paris", "rome", "tokyo"], &vocab);
        assert_eq!(stats.count("paris"), 4);
        assert_eq!(stats.count("rome"), 0);
        assert_eq!(stats.count("tokyo"), 0);
        assert_eq!(stats.counts.len(), 3);

        let three: Vec<_> = ["paris a", "b paris", "paris"].iter().map(|l| encode(&vocab, l, 16)).collect();
        assert_eq!(entity_frequencies(&three, ["paris"], &vocab).count("paris"), 3);
    }

    #[test]
    fn overlapping_entities_count_non_overlapping() {
        let vocab = build_vocab(&["a a a"], 1).unwrap();
        let corpus = vec![encode(&vocab, "a a a", 16)];
        let stats = entity_frequencies(&corpus, ["a a"], &vocab);
        assert_eq!(stats.count("a a"), 1);
    }
}
