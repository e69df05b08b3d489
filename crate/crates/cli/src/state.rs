//! Files written next to a checkpoint besides the model itself.

use std::collections::BTreeMap;
use std::path::Path;

use easynlp_core::data_hub::LabelMap;
use easynlp_core::model_zoo::{write_atomic, EVAL_REPORT_FILE, LABEL_MAP_FILE};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Context};

pub const APP_STATE_FILE: &str = "app_state.json";

/// How to rebuild inputs (and few-shot heads) for evaluate and predict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppState {
    pub app_name: String,
    pub input_schema: String,
    pub first_sequence: String,
    pub second_sequence: Option<String>,
    pub label_name: Option<String>,
    pub sequence_length: usize,
    pub fewshot: Option<FewShotState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FewShotState {
    pub method: String,
    pub template: String,
    pub verbalizer: Option<Vec<String>>,
    /// Continuous prompt rows `[k][d]`.
    pub prompt: Option<Vec<Vec<f64>>>,
    pub centroids: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_metric: f64,
}

/// Written as `eval_report.json` after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub app_name: String,
    pub dev_metric_name: String,
    pub epochs: Vec<EpochRecord>,
    /// 1-based; ties go to the earlier epoch.
    pub best_epoch: usize,
    pub best_dev_metric: f64,
    pub wall_time_secs: f64,
    pub checkpoint_dir: String,
    /// App-specific numbers about the best model.
    pub extra: BTreeMap<String, f64>,
}

/// Written by `--mode=evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub app_name: String,
    pub table: String,
    pub num_examples: usize,
    pub metrics: BTreeMap<String, f64>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(easynlp_core::Error::from).context("serialize")?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).context(&path.display().to_string())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let what = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(easynlp_core::Error::from).context(&what)?;
    serde_json::from_str(&text)
        .map_err(|e| easynlp_core::Error::Format(e.to_string()))
        .context(&what)
}

pub fn save_app_state(dir: &Path, state: &AppState) -> Result<(), CliError> {
    write_json(&dir.join(APP_STATE_FILE), state)
}

pub fn load_app_state(dir: &Path) -> Result<AppState, CliError> {
    read_json(&dir.join(APP_STATE_FILE))
}

pub fn save_label_map(dir: &Path, map: &LabelMap) -> Result<(), CliError> {
    write_json(&dir.join(LABEL_MAP_FILE), map)
}

pub fn load_label_map(dir: &Path) -> Result<Option<LabelMap>, CliError> {
    let path = dir.join(LABEL_MAP_FILE);
    if !path.exists() {
        return Ok(None);
    }
    read_json(&path).map(Some)
}

pub fn save_train_report(dir: &Path, report: &TrainReport) -> Result<(), CliError> {
    write_json(&dir.join(EVAL_REPORT_FILE), report)
}

pub fn load_train_report(dir: &Path) -> Result<TrainReport, CliError> {
    read_json(&dir.join(EVAL_REPORT_FILE))
}

pub fn save_eval_report(path: &Path, report: &EvalReport) -> Result<(), CliError> {
    write_json(path, report)
}
