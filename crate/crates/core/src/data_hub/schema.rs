use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnKind {
    Str,
    Int,
    Float,
}

impl ColumnKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "str" => Some(ColumnKind::Str),
            "int" => Some(ColumnKind::Int),
            "float" => Some(ColumnKind::Float),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ColumnKind::Str => "str",
            ColumnKind::Int => "int",
            ColumnKind::Float => "float",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
    pub arity: usize,
}

/// Ordered column description, written `name:kind:arity,...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSchema {
    columns: Vec<Column>,
}

impl DatasetSchema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in &columns {
            if c.arity == 0 {
                return Err(Error::Schema(format!("column {:?} has arity 0", c.name)));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(Error::Schema(format!("duplicate column name {:?}", c.name)));
            }
        }
        Ok(DatasetSchema { columns })
    }

    /// Parses an `--input_schema` value such as `sent:str:1,label:str:1`.
    pub fn parse(spec: &str) -> Result<Self> {
        let mut columns = Vec::new();
        for segment in spec.split(',') {
            let parts: Vec<&str> = segment.split(':').collect();
            let malformed = || Error::Parse(format!("malformed schema segment {segment:?}; expected name:kind:arity"));
            if parts.len() != 3 || parts[0].is_empty() {
                return Err(malformed());
            }
            let kind = ColumnKind::parse(parts[1])
                .ok_or_else(|| Error::Parse(format!("unknown column kind {:?} in segment {segment:?}", parts[1])))?;
            let arity: usize = parts[2].parse().map_err(|_| malformed())?;
            columns.push(Column {
                name: parts[0].to_string(),
                kind,
                arity,
            });
        }
        Self::new(columns)
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    /// A copy with extra columns appended.
    pub fn extended(&self, extra: impl IntoIterator<Item = Column>) -> Result<Self> {
        let mut columns = self.columns.clone();
        columns.extend(extra);
        Self::new(columns)
    }
}

impl fmt::Display for DatasetSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.columns.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}:{}:{}", c.name, c.kind.as_str(), c.arity)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Str(String),
    Int(i64),
    Float(f64),
    /// Arity > 1: the field holds `arity` comma-separated scalars.
    List(Vec<Value>),
}

impl Value {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(s) => Some(s),
            _ => None,
        }
    }

    /// Text form used both for writing tables and for label lookup.
    pub fn render(&self) -> String {
        match self {
            Value::Str(s) => s.clone(),
            Value::Int(i) => i.to_string(),
            Value::Float(x) => x.to_string(),
            Value::List(items) => items.iter().map(Value::render).collect::<Vec<_>>().join(","),
        }
    }
}

fn parse_scalar(raw: &str, kind: ColumnKind) -> std::result::Result<Value, String> {
    match kind {
        ColumnKind::Str => Ok(Value::Str(raw.to_string())),
        ColumnKind::Int => raw.trim().parse().map(Value::Int).map_err(|_| format!("{raw:?} is not an int")),
        ColumnKind::Float => match raw.trim().parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(Value::Float(x)),
            _ => Err(format!("{raw:?} is not a finite float")),
        },
    }
}

/// One row of typed fields keyed by column name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Record {
    pub values: BTreeMap<String, Value>,
}

impl Record {
    pub fn get(&self, column: &str) -> Option<&Value> {
        self.values.get(column)
    }

    /// The column's value as text, or a schema error naming the column.
    pub fn text(&self, column: &str) -> Result<&str> {
        match self.values.get(column) {
            Some(Value::Str(s)) => Ok(s),
            Some(other) => Err(Error::Schema(format!("column {column:?} is not a single string: {other:?}"))),
            None => Err(Error::Schema(format!("record has no column {column:?}"))),
        }
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Self {
        Record {
            values: pairs
                .into_iter()
                .map(|(k, v)| (k.to_string(), Value::Str(v.to_string())))
                .collect(),
        }
    }
}

/// Parses one TSV line. `line_no` is 1-based and only used in messages.
pub fn parse_line(line: &str, schema: &DatasetSchema, line_no: usize) -> Result<Record> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != schema.len() {
        return Err(Error::Parse(format!(
            "line {line_no}: expected {} fields, found {}",
            schema.len(),
            fields.len()
        )));
    }
    let mut values = BTreeMap::new();
    for (col, raw) in schema.columns().iter().zip(fields) {
        let err = |msg: String| Error::Parse(format!("line {line_no}, column {:?}: {msg}", col.name));
        let value = if col.arity == 1 {
            parse_scalar(raw, col.kind).map_err(err)?
        } else {
            let items: Vec<&str> = raw.split(',').collect();
            if items.len() != col.arity {
                return Err(err(format!("expected {} comma-separated values, found {}", col.arity, items.len())));
            }
            Value::List(
                items
                    .iter()
                    .map(|s| parse_scalar(s, col.kind))
                    .collect::<std::result::Result<_, _>>()
                    .map_err(err)?,
            )
        };
        values.insert(col.name.clone(), value);
    }
    Ok(Record { values })
}

/// Parses TSV text. Empty lines are skipped; `\r\n` endings are accepted.
pub fn parse_table(text: &str, schema: &DatasetSchema) -> Result<Vec<Record>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_line(l.strip_suffix('\r').unwrap_or(l), schema, i + 1))
        .collect()
}

pub fn read_table(path: &Path, schema: &DatasetSchema) -> Result<Vec<Record>> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_table(&text, schema).map_err(|e| match e {
        Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Serializes records in schema column order, one line each.
pub fn render_table(records: &[Record], schema: &DatasetSchema) -> Result<String> {
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        for (j, col) in schema.columns().iter().enumerate() {
            let v = r
                .get(&col.name)
                .ok_or_else(|| Error::Schema(format!("record {i} has no column {:?}", col.name)))?;
            let s = v.render();
            if s.contains(['\t', '\n', '\r']) {
                return Err(Error::Validation(format!(
                    "record {i}, column {:?}: tabs and newlines cannot be written to TSV",
                    col.name
                )));
            }
            if j > 0 {
                out.push('\t');
            }
            out.push_str(&s);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_table(path: &Path, records: &[Record], schema: &DatasetSchema) -> Result<()> {
    fs::write(path, render_table(records, schema)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_cli_schema() {
        let s = DatasetSchema::parse("sent:str:1,label:str:1").unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.columns()[0], Column { name: "sent".into(), kind: ColumnKind::Str, arity: 1 });
        assert_eq!(s.columns()[1].name, "label");
        let m = DatasetSchema::parse("s1:str:1,s2:str:1,label:str:1").unwrap();
        assert_eq!(m.len(), 3);
    }

    #[test]
    fn schema_errors() {
        match DatasetSchema::parse("sent:blob:1") {
            Err(Error::Parse(msg)) => assert!(msg.contains("sent:blob:1")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(DatasetSchema::parse("a:str"), Err(Error::Parse(_))));
        assert!(matches!(DatasetSchema::parse("a:str:x"), Err(Error::Parse(_))));
        assert!(matches!(DatasetSchema::parse("a:str:1,a:int:1"), Err(Error::Schema(_))));
        assert!(matches!(DatasetSchema::parse("a:str:0"), Err(Error::Schema(_))));
    }

    #[test]
    fn reads_records() {
        let s = DatasetSchema::parse("sent:str:1,label:str:1").unwrap();
        let recs = parse_table("hello world\t1\n", &s).unwrap();
        assert_eq!(recs, vec![Record::from_pairs([("sent", "hello world"), ("label", "1")])]);
        assert!(parse_table("", &s).unwrap().is_empty());
        match parse_table("a\t1\nb\t2\tx\n", &s) {
            Err(Error::Parse(msg)) => assert!(msg.contains("line 2"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn typed_and_multi_valued_fields() {
        let s = DatasetSchema::parse("n:int:1,x:float:1,v:float:3").unwrap();
        let r = parse_line("7\t0.5\t1,2,3.5", &s, 1).unwrap();
        assert_eq!(r.get("n"), Some(&Value::Int(7)));
        assert_eq!(r.get("x"), Some(&Value::Float(0.5)));
        assert_eq!(
            r.get("v"),
            Some(&Value::List(vec![Value::Float(1.0), Value::Float(2.0), Value::Float(3.5)]))
        );
        assert!(matches!(parse_line("x\t0.5\t1,2,3", &s, 4), Err(Error::Parse(_))));
        assert!(matches!(parse_line("1\tnan\t1,2,3", &s, 4), Err(Error::Parse(_))));
        assert!(matches!(parse_line("1\t0.5\t1,2", &s, 4), Err(Error::Parse(_))));
    }

    #[test]
    fn file_roundtrip() {
        let s = DatasetSchema::parse("sent:str:1,label:str:1").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tsv");
        std::fs::write(&p, "a b\t0\nc\t1\n").unwrap();
        let recs = read_table(&p, &s).unwrap();
        assert_eq!(render_table(&recs, &s).unwrap(), "a b\t0\nc\t1\n");
        assert!(read_table(&dir.path().join("missing.tsv"), &s).is_err());
    }

    fn column() -> impl Strategy<Value = (String, usize, usize)> {
        ("[a-z][a-z0-9_]{0,6}", 0usize..3, 1usize..4)
    }

    proptest! {
        #[test]
        fn schema_display_roundtrip(cols in prop::collection::vec(column(), 1..6)) {
            let kinds = [ColumnKind::Str, ColumnKind::Int, ColumnKind::Float];
            let mut seen = HashSet::new();
            let cols: Vec<Column> = cols
                .into_iter()
                .filter(|(n, _, _)| seen.insert(n.clone()))
                .map(|(name, k, arity)| Column { name, kind: kinds[k], arity })
                .collect();
            let schema = DatasetSchema::new(cols).unwrap();
            prop_assert_eq!(DatasetSchema::parse(&schema.to_string()).unwrap(), schema);
        }

        #[test]
        fn table_roundtrip(rows in prop::collection::vec(("[a-z ]{0,12}", any::<i32>(), -1e6f64..1e6), 0..20)) {
            let s = DatasetSchema::parse("t:str:1,i:int:1,x:float:1").unwrap();
            let text: String = rows.iter().map(|(t, i, x)| format!("{t}\t{i}\t{x}\n")).collect();
            let recs = parse_table(&text, &s).unwrap();
            let nonempty = rows.len();
            prop_assert_eq!(recs.len(), nonempty);
            let again = parse_table(&render_table(&recs, &s).unwrap(), &s).unwrap();
            prop_assert_eq!(again, recs);
        }
    }
}
