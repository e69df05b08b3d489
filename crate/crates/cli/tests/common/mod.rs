#![allow(dead_code)]

use std::path::{Path, PathBuf};

use easynlp_core::data_hub::{write_table, DatasetSchema, Record};

/// Writes `records` as `<dir>/<name>` and returns the path as a string.
pub fn table(dir: &Path, name: &str, records: &[Record], schema: &DatasetSchema) -> String {
    let path = dir.join(name);
    write_table(&path, records, schema).unwrap();
    path.display().to_string()
}

pub fn run(args: &[String]) -> i32 {
    easynlp_cli::run(args)
}

pub fn args(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// The Code 2 invocation with paths and epoch count substituted.
pub fn code2(train: &str, dev: &str, ckpt: &Path, epochs: usize) -> Vec<String> {
    vec![
        "--mode=train".into(),
        "--worker_gpu=1".into(),
        format!("--tables={train},{dev}"),
        "--input_schema=sent:str:1,label:str:1".into(),
        "--first_sequence=sent".into(),
        "--label_name=label".into(),
        "--label_enumerate_values=0,1".into(),
        format!("--checkpoint_dir={}", ckpt.display()),
        format!("--epoch_num={epochs}"),
        "--sequence_length=128".into(),
        "--app_name=text_classify".into(),
        "--user_defined_parameters=".into(),
        "'pretrain_model_name_or_path=bert-small-uncased'".into(),
    ]
}

pub fn ckpt(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
