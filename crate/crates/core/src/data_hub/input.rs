use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::schema::{DatasetSchema, Record, Value};
use crate::error::{Error, Result};
use crate::tokenization::{pad_batch, Batch, Labels, TokenSequence, Vocabulary, CLS_ID, SEP_ID};

/// Record-to-input conversions supported by [`to_model_input`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    TextClassify,
    TextMatch,
    LanguageModeling,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_classify" => Ok(Task::TextClassify),
            "text_match" => Ok(Task::TextMatch),
            "language_modeling" => Ok(Task::LanguageModeling),
            _ => Err(Error::Config(format!(
                "task {s:?} has no input conversion; expected text_classify, text_match or language_modeling"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::TextClassify => "text_classify",
            Task::TextMatch => "text_match",
            Task::LanguageModeling => "language_modeling",
        })
    }
}

/// Ordered label strings; a label's id is its position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    labels: Vec<String>,
}

impl LabelMap {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(Error::Label("label map is empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
            return Err(Error::Label(format!("duplicate label {dup:?}")));
        }
        Ok(LabelMap { labels })
    }

    /// Parses a comma list such as `0,1`.
    pub fn parse(list: &str) -> Result<Self> {
        Self::new(list.split(',').map(str::trim))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.labels.iter().position(|l| l == label).ok_or_else(|| {
            Error::Label(format!("label {label:?} is not in the label map [{}]", self.labels.join(",")))
        })
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }
}

/// Which columns feed the model.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSpec {
    pub task: Task,
    pub first_sequence: String,
    pub second_sequence: Option<String>,
    pub label_name: Option<String>,
    pub max_len: usize,
}

/// Encoded records, ready to be batched by index.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDataset {
    pub seqs: Vec<TokenSequence>,
    pub labels: Vec<Option<usize>>,
}

impl EncodedDataset {
    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    /// Padded batch of the given rows; class labels are attached when every
    /// selected row has one.
    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        let seqs: Vec<TokenSequence> = rows.iter().map(|&i| self.seqs[i].clone()).collect();
        let mut batch = pad_batch(&seqs, None)?;
        let labels: Option<Vec<usize>> = rows.iter().map(|&i| self.labels[i]).collect();
        if let Some(l) = labels {
            batch.labels = Labels::Classes(l);
        }
        Ok(batch)
    }

    pub fn all_labels(&self) -> Option<Vec<usize>> {
        self.labels.iter().copied().collect()
    }
}

fn text_column<'a>(record: &'a Record, schema: &DatasetSchema, name: &str) -> Result<&'a str> {
    let col = schema
        .column(name)
        .ok_or_else(|| Error::Schema(format!("schema has no column {name:?} (schema: {schema})")))?;
    if col.arity != 1 {
        return Err(Error::Schema(format!(
            "column {name:?} has arity {}; only arity-1 columns can feed the model",
            col.arity
        )));
    }
    record.text(name)
}

/// `[CLS] a [SEP] b [SEP]`, trimming the longer segment first when over `max_len`.
pub fn encode_pair(vocab: &Vocabulary, a: &str, b: &str, max_len: usize) -> TokenSequence {
    let mut a = vocab.ids_of(a);
    let mut b = vocab.ids_of(b);
    let budget = max_len.max(3) - 3;
    while a.len() + b.len() > budget {
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
    let mut ids = Vec::with_capacity(a.len() + b.len() + 3);
    ids.push(CLS_ID);
    ids.extend(a);
    ids.push(SEP_ID);
    ids.extend(b);
    ids.push(SEP_ID);
    TokenSequence {
        ids,
        entity_spans: Vec::new(),
    }
}

/// Encodes each record according to `spec`, mapping labels through `label_map`.
pub fn encode_records(
    records: &[Record],
    schema: &DatasetSchema,
    vocab: &Vocabulary,
    spec: &InputSpec,
    label_map: Option<&LabelMap>,
) -> Result<EncodedDataset> {
    let mut seqs = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for rec in records {
        let first = text_column(rec, schema, &spec.first_sequence)?;
        let seq = match (spec.task, &spec.second_sequence) {
            (Task::TextMatch, Some(second)) => {
                encode_pair(vocab, first, text_column(rec, schema, second)?, spec.max_len)
            }
            (Task::TextMatch, None) => {
                return Err(Error::Schema("text_match needs a second_sequence column".into()));
            }
            _ => crate::tokenization::encode(vocab, first, spec.max_len),
        };
        let label = match (spec.task, &spec.label_name, label_map) {
            (Task::LanguageModeling, _, _) => None,
            (_, Some(name), Some(map)) => {
                let col = schema
                    .column(name)
                    .ok_or_else(|| Error::Schema(format!("schema has no label column {name:?}")))?;
                if col.arity != 1 {
                    return Err(Error::Schema(format!("label column {name:?} must have arity 1")));
                }
                let v = rec
                    .get(name)
                    .ok_or_else(|| Error::Schema(format!("record has no column {name:?}")))?;
                Some(map.id(&v.render())?)
            }
            _ => None,
        };
        seqs.push(seq);
        labels.push(label);
    }
    Ok(EncodedDataset { seqs, labels })
}

/// Encodes and pads `records` into one batch.
pub fn to_model_input(
    records: &[Record],
    schema: &DatasetSchema,
    vocab: &Vocabulary,
    spec: &InputSpec,
    label_map: Option<&LabelMap>,
) -> Result<Batch> {
    let data = encode_records(records, schema, vocab, spec, label_map)?;
    if data.is_empty() {
        return Err(Error::Domain("no records to convert".into()));
    }
    let rows: Vec<usize> = (0..data.len()).collect();
    data.batch(&rows)
}

/// Text of the named string columns, for vocabulary building.
pub fn record_texts<'a>(records: &'a [Record], columns: &[&str]) -> Vec<&'a str> {
    let mut out = Vec::new();
    for r in records {
        for c in columns {
            if let Some(Value::Str(s)) = r.get(c) {
                out.push(s.as_str());
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenization::build_vocab;

    fn cls_spec() -> InputSpec {
        InputSpec {
            task: Task::TextClassify,
            first_sequence: "sent".into(),
            second_sequence: None,
            label_name: Some("label".into()),
            max_len: 16,
        }
    }

    #[test]
    fn classification_record() {
        let schema = DatasetSchema::parse("sent:str:1,label:str:1").unwrap();
        let vocab = build_vocab(&["good movie", "bad"], 1).unwrap();
        let recs = vec![
            Record::from_pairs([("sent", "good movie"), ("label", "1")]),
            Record::from_pairs([("sent", "bad"), ("label", "0")]),
        ];
        let map = LabelMap::parse("0,1").unwrap();
        let b = to_model_input(&recs, &schema, &vocab, &cls_spec(), Some(&map)).unwrap();
        assert_eq!(b.labels, Labels::Classes(vec![1, 0]));
        assert_eq!(b.row(0), &[2, vocab.id("good"), vocab.id("movie"), 3]);

        let bad = vec![Record::from_pairs([("sent", "bad"), ("label", "2")])];
        match to_model_input(&bad, &schema, &vocab, &cls_spec(), Some(&map)) {
            Err(Error::Label(msg)) => assert!(msg.contains("\"2\"")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn match_record_has_two_segments() {
        let schema = DatasetSchema::parse("s1:str:1,s2:str:1,label:str:1").unwrap();
        let vocab = build_vocab(&["a b c"], 1).unwrap();
        let recs = vec![Record::from_pairs([("s1", "a b"), ("s2", "c"), ("label", "1")])];
        let spec = InputSpec {
            task: Task::TextMatch,
            first_sequence: "s1".into(),
            second_sequence: Some("s2".into()),
            label_name: Some("label".into()),
            max_len: 16,
        };
        let b = to_model_input(&recs, &schema, &vocab, &spec, Some(&LabelMap::parse("0,1").unwrap())).unwrap();
        let (a, bb, c) = (vocab.id("a"), vocab.id("b"), vocab.id("c"));
        assert_eq!(b.row(0), &[2, a, bb, 3, c, 3]);
    }

    #[test]
    fn pair_truncation_trims_longer_side() {
        let vocab = build_vocab(&["a b c d e"], 1).unwrap();
        let s = encode_pair(&vocab, "a b c d", "e", 6);
        assert_eq!(s.ids.len(), 6);
        assert_eq!(s.ids.iter().filter(|&&i| i == SEP_ID).count(), 2);
        assert_eq!(s.ids[4], vocab.id("e"));
    }

    #[test]
    fn multi_valued_columns_rejected() {
        let schema = DatasetSchema::parse("sent:str:2,label:str:1").unwrap();
        let vocab = build_vocab(&["a"], 1).unwrap();
        let recs = super::super::schema::parse_table("a,b\t0\n", &schema).unwrap();
        let map = LabelMap::parse("0").unwrap();
        assert!(matches!(
            to_model_input(&recs, &schema, &vocab, &cls_spec(), Some(&map)),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn label_map_rules() {
        assert!(matches!(LabelMap::parse("0,0"), Err(Error::Label(_))));
        let m = LabelMap::parse("neg, pos").unwrap();
        assert_eq!(m.id("pos").unwrap(), 1);
        assert_eq!(m.label(0), Some("neg"));
    }
}
