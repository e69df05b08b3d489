//! Schemas, table readers, the toy dataset registry and the triple store.

mod input;
mod schema;
pub mod toy;
mod triples;

use std::path::{Path, PathBuf};

pub use input::{encode_pair, encode_records, record_texts, to_model_input, EncodedDataset, InputSpec, LabelMap, Task};
pub use schema::{
    parse_line, parse_table, read_table, render_table, write_table, Column, ColumnKind, DatasetSchema, Record, Value,
};
pub use triples::{
    entity_frequencies, load_triples, parse_triples, relation_surface, render_triples, EntityStats, Triple,
    TripleStore,
};

use crate::error::{Error, Result};

/// Environment variable naming a directory of `<name>.tsv` files that
/// replace the generated toy datasets.
pub const TOY_DATA_ENV: &str = "EASYNLP_TOY_DATA_DIR";

/// Seed of the bundled toy datasets.
pub const TOY_SEED: u64 = 42;

const REGISTRY: [&str; 4] = ["toy-corpus", "toy-kb", "toy-match", "toy-tnews"];

/// Registered dataset names, sorted.
pub fn dataset_names() -> Vec<String> {
    REGISTRY.iter().map(|s| s.to_string()).collect()
}

pub fn dataset_schema(name: &str) -> Result<DatasetSchema> {
    match name {
        "toy-corpus" => Ok(toy::corpus_schema()),
        "toy-kb" => Ok(toy::kb_schema()),
        "toy-match" => Ok(toy::match_schema()),
        "toy-tnews" => Ok(toy::tnews_schema()),
        _ => Err(Error::Registry {
            name: name.to_string(),
            available: dataset_names(),
        }),
    }
}

fn generate(name: &str) -> Vec<Record> {
    match name {
        "toy-corpus" => {
            let w = toy::knowledge_world(&toy::WorldConfig::default(), TOY_SEED);
            w.corpus.iter().map(|s| Record::from_pairs([("text", s.as_str())])).collect()
        }
        "toy-kb" => {
            let w = toy::knowledge_world(&toy::WorldConfig::default(), TOY_SEED);
            toy::triple_records(&w.triples)
        }
        "toy-match" => toy::toy_match(64, TOY_SEED),
        "toy-tnews" => toy::toy_tnews(64, TOY_SEED),
        _ => unreachable!("checked by dataset_schema"),
    }
}

/// Loads a registered dataset by name. When `EASYNLP_TOY_DATA_DIR` is set,
/// `<dir>/<name>.tsv` is read instead of generating the data.
pub fn load_dataset(name: &str) -> Result<(Vec<Record>, DatasetSchema)> {
    let schema = dataset_schema(name)?;
    if let Some(dir) = std::env::var_os(TOY_DATA_ENV) {
        let path = PathBuf::from(dir).join(format!("{name}.tsv"));
        return Ok((read_table(&path, &schema)?, schema));
    }
    Ok((generate(name), schema))
}

/// Writes every registered dataset as `<dir>/<name>.tsv`.
pub fn export_datasets(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for name in REGISTRY {
        let schema = dataset_schema(name)?;
        write_table(&dir.join(format!("{name}.tsv")), &generate(name), &schema)?;
    }
    Ok(())
}
