//! Seeded synthetic datasets.
//!
//! Every generator is a pure function of its arguments and the documented
//! PRNG, so the bundled datasets are identical on every platform.

use super::schema::{DatasetSchema, Record, Value};
use super::triples::{relation_surface, Triple};
use crate::rng::Rng;

const FILLER: [&str; 12] = [
    "the", "a", "today", "news", "report", "said", "new", "week", "people", "city", "this", "of",
];

/// Keyword pools for the two-topic classification set (label "0" and "1").
pub const TOPIC_WORDS: [[&str; 8]; 2] = [
    ["football", "match", "team", "goal", "coach", "league", "player", "score"],
    ["stock", "market", "bank", "price", "trade", "profit", "fund", "investor"],
];

fn topic_sentence(rng: &mut Rng, topic: usize) -> String {
    let len = 5 + rng.below(5);
    let n_topic = 2 + rng.below(2);
    let mut words: Vec<&str> = (0..len - n_topic).map(|_| FILLER[rng.below(FILLER.len())]).collect();
    for _ in 0..n_topic {
        let pos = rng.below(words.len() + 1);
        words.insert(pos, TOPIC_WORDS[topic][rng.below(8)]);
    }
    words.join(" ")
}

pub fn tnews_schema() -> DatasetSchema {
    DatasetSchema::parse("sent:str:1,label:str:1").expect("static schema")
}

/// Two-topic news headlines, balanced labels "0"/"1".
pub fn toy_tnews(n: usize, seed: u64) -> Vec<Record> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let topic = i % 2;
            let sent = topic_sentence(&mut rng, topic);
            Record::from_pairs([("sent", sent.as_str()), ("label", if topic == 0 { "0" } else { "1" })])
        })
        .collect()
}

pub fn match_schema() -> DatasetSchema {
    DatasetSchema::parse("s1:str:1,s2:str:1,label:str:1").expect("static schema")
}

/// Sentence pairs labelled "1" when both share a topic.
pub fn toy_match(n: usize, seed: u64) -> Vec<Record> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let same = i % 2 == 0;
            let t1 = rng.below(2);
            let t2 = if same { t1 } else { 1 - t1 };
            let a = topic_sentence(&mut rng, t1);
            let b = topic_sentence(&mut rng, t2);
            Record::from_pairs([("s1", a.as_str()), ("s2", b.as_str()), ("label", if same { "1" } else { "0" })])
        })
        .collect()
}

/// Polar words shared by every review domain, by label.
const SHARED_POLAR: [[&str; 10]; 2] = [
    ["awful", "boring", "hate", "waste", "poor", "weak", "dull", "worst", "mess", "sad"],
    ["great", "love", "enjoy", "superb", "fine", "strong", "fresh", "best", "gem", "fun"],
];

/// Per-domain nouns and domain-only polar words (negative, positive).
const REVIEW_DOMAINS: [([&str; 4], [&str; 2], [&str; 2]); 2] = [
    (["book", "author", "novel", "chapter"], ["unreadable", "clumsy"], ["gripping", "vivid"]),
    (["film", "actor", "scene", "director"], ["miscast", "choppy"], ["cinematic", "moving"]),
];

pub fn reviews_schema() -> DatasetSchema {
    DatasetSchema::parse("sent:str:1,label:str:1,domain:str:1").expect("static schema")
}

/// Two-domain polarity reviews: `counts[d]` records from domain `d`,
/// balanced labels "0"/"1". Each review carries one polar word, shared
/// across domains with probability 0.75, otherwise domain-specific.
pub fn toy_reviews(counts: &[usize], seed: u64) -> Vec<Record> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    for (d, &n) in counts.iter().enumerate() {
        let (nouns, neg, pos) = REVIEW_DOMAINS[d % REVIEW_DOMAINS.len()];
        for i in 0..n {
            let label = i % 2;
            let polar = if rng.next_f64() < 0.75 {
                SHARED_POLAR[label][rng.below(10)]
            } else {
                [neg, pos][label][rng.below(2)]
            };
            let len = 4 + rng.below(4);
            let mut words: Vec<&str> = (0..len).map(|_| FILLER[rng.below(FILLER.len())]).collect();
            words.insert(rng.below(words.len() + 1), nouns[rng.below(4)]);
            words.insert(rng.below(words.len() + 1), polar);
            let sent = words.join(" ");
            let (l, dom) = (label.to_string(), d.to_string());
            out.push(Record::from_pairs([("sent", sent.as_str()), ("label", l.as_str()), ("domain", dom.as_str())]));
        }
    }
    out
}

const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "ru", "se", "ta", "vo", "ne", "di", "pa", "go", "zu", "be", "ho", "fi", "wa",
];

/// Deterministic pseudo-word for `index`, e.g. `kalomi`.
pub fn pseudo_word(index: usize, syllables: usize) -> String {
    let mut out = String::new();
    let mut x = index;
    for _ in 0..syllables {
        out.push_str(SYLLABLES[x % SYLLABLES.len()]);
        x /= SYLLABLES.len();
    }
    out
}

/// Knobs for the synthetic knowledge world.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldConfig {
    pub relations: Vec<(&'static str, &'static str)>,
    pub tails_per_relation: usize,
    pub frequent_entities: usize,
    pub longtail_entities: usize,
    pub triples_per_longtail: usize,
    /// Leading long-tail triples stated once in the corpus; the rest are probed.
    pub stated_per_longtail: usize,
    pub corpus_sentences: usize,
    pub longtail_mentions: usize,
    /// Also state all facts of each frequent entity in one sentence.
    pub profiles: bool,
    /// Fill the remaining long-tail mentions by restating their stated facts
    /// instead of fact-free sentences.
    pub restate: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            relations: vec![
                ("born_in", "burg"),
                ("works_as", "ist"),
                ("speaks", "ese"),
                ("plays", "ball"),
            ],
            tails_per_relation: 8,
            frequent_entities: 20,
            longtail_entities: 25,
            triples_per_longtail: 2,
            stated_per_longtail: 1,
            corpus_sentences: 2000,
            longtail_mentions: 2,
            profiles: true,
            restate: false,
        }
    }
}

/// A corpus, a knowledge base and held-out cloze probes.
///
/// Frequent entities have all their facts stated many times in the corpus.
/// Long-tail entities are mentioned `longtail_mentions` times: once for each
/// of their first `stated_per_longtail` facts, otherwise in fact-free
/// sentences. Their remaining facts exist only in the knowledge base and are
/// what the probes ask about.
#[derive(Debug, Clone)]
pub struct KnowledgeWorld {
    pub corpus: Vec<String>,
    pub triples: Vec<Triple>,
    pub frequent: Vec<String>,
    pub longtail: Vec<String>,
    /// `(sentence with one [MASK], gold token)`
    pub probes: Vec<(String, String)>,
}

const NEUTRAL: [&str; 4] = [
    "{e} was in the news this week .",
    "people said {e} is new .",
    "the report of {e} .",
    "this week {e} said a new report .",
];

pub fn knowledge_world(cfg: &WorldConfig, seed: u64) -> KnowledgeWorld {
    let mut rng = Rng::new(seed);
    let tails: Vec<Vec<String>> = cfg
        .relations
        .iter()
        .enumerate()
        .map(|(r, (_, suffix))| {
            (0..cfg.tails_per_relation)
                .map(|i| format!("{}{suffix}", pseudo_word(r * 97 + i * 13 + 5, 2)))
                .collect()
        })
        .collect();
    let n_ent = cfg.frequent_entities + cfg.longtail_entities;
    let names: Vec<String> = (0..n_ent).map(|i| pseudo_word(i * 7 + 300, 3)).collect();
    let (frequent, longtail) = names.split_at(cfg.frequent_entities);

    let mut triples = Vec::new();
    let mut frequent_facts = Vec::new();
    for e in frequent {
        let mut clauses = Vec::new();
        for (r, (rel, _)) in cfg.relations.iter().enumerate() {
            let t = &tails[r][rng.below(cfg.tails_per_relation)];
            frequent_facts.push(format!("{e} {} {t} .", relation_surface(rel)));
            clauses.push(format!("{} {t}", relation_surface(rel)));
            triples.push(Triple::new(e.clone(), *rel, t.clone()));
        }
        if cfg.profiles {
            frequent_facts.push(format!("{e} {} .", clauses.join(" , ")));
        }
    }
    let mut probes = Vec::new();
    let mut corpus = Vec::with_capacity(cfg.corpus_sentences);
    for e in longtail {
        let mut rels: Vec<usize> = (0..cfg.relations.len()).collect();
        rng.shuffle(&mut rels);
        let mut stated = Vec::new();
        for (k, &r) in rels.iter().take(cfg.triples_per_longtail).enumerate() {
            let rel = cfg.relations[r].0;
            let t = &tails[r][rng.below(cfg.tails_per_relation)];
            triples.push(Triple::new(e.clone(), rel, t.clone()));
            if k < cfg.stated_per_longtail {
                stated.push(format!("{e} {} {t} .", relation_surface(rel)));
            } else {
                probes.push((format!("{e} {} [MASK] .", relation_surface(rel)), t.clone()));
            }
        }
        for m in 0..cfg.longtail_mentions.max(stated.len()) {
            if m < stated.len() || (cfg.restate && !stated.is_empty()) {
                corpus.push(stated[m % stated.len()].clone());
            } else {
                corpus.push(NEUTRAL[rng.below(NEUTRAL.len())].replace("{e}", e));
            }
        }
    }
    let mut i = 0;
    while corpus.len() < cfg.corpus_sentences {
        corpus.push(frequent_facts[i % frequent_facts.len()].clone());
        i += 1;
    }
    rng.shuffle(&mut corpus);
    KnowledgeWorld {
        corpus,
        triples,
        frequent: frequent.to_vec(),
        longtail: longtail.to_vec(),
        probes,
    }
}

pub fn corpus_schema() -> DatasetSchema {
    DatasetSchema::parse("text:str:1").expect("static schema")
}

pub fn kb_schema() -> DatasetSchema {
    DatasetSchema::parse("head:str:1,relation:str:1,tail:str:1").expect("static schema")
}

pub fn triple_records(triples: &[Triple]) -> Vec<Record> {
    triples
        .iter()
        .map(|t| Record::from_pairs([("head", t.head.as_str()), ("relation", t.relation.as_str()), ("tail", t.tail.as_str())]))
        .collect()
}

pub fn records_to_triples(records: &[Record]) -> Vec<Triple> {
    let field = |r: &Record, k: &str| r.get(k).map(Value::render).unwrap_or_default();
    records
        .iter()
        .map(|r| Triple::new(field(r, "head"), field(r, "relation"), field(r, "tail")))
        .collect()
}
