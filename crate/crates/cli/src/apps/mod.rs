//! Training, evaluation and prediction pipelines behind each app name.

mod classify;
mod distill;
mod fewshot;
mod lm;

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use easynlp_core::data_hub::{read_table, DatasetSchema, LabelMap, Record};
use easynlp_core::model_zoo::{load_checkpoint, save_checkpoint, zoo_config, TransformerModel, ZOO_NAMES};
use easynlp_core::tokenization::{build_vocab, tokenize, Vocabulary};
use log::info;

use crate::config::{AppKind, AppName, CliConfig};
use crate::error::{CliError, Context};
use crate::state::{save_app_state, save_label_map, save_train_report, AppState, EpochRecord, EvalReport, TrainReport};

pub use fewshot::fewshot_model_from_state;

pub const DEFAULT_BACKBONE: &str = "bert-small-uncased";
pub const DEFAULT_STUDENT: &str = "bert-tiny-uncased";

/// One training pipeline driven epoch by epoch.
trait Job {
    fn dev_metric_name(&self) -> &'static str;
    fn train_epoch(&mut self) -> Result<f64, CliError>;
    fn dev_metric(&mut self) -> Result<f64, CliError>;
    /// Writes the current model into `dir` (called for every new best epoch).
    fn save(&mut self, dir: &Path) -> Result<(), CliError>;
    /// Extra report entries about the last saved model.
    fn extras(&mut self) -> Result<BTreeMap<String, f64>, CliError> {
        Ok(BTreeMap::new())
    }
}

fn drive(job: &mut dyn Job, cfg: &CliConfig, app: AppName) -> Result<TrainReport, CliError> {
    let start = Instant::now();
    std::fs::create_dir_all(&cfg.checkpoint_dir)
        .map_err(easynlp_core::Error::from)
        .context("--checkpoint_dir")?;
    let mut epochs = Vec::with_capacity(cfg.epoch_num);
    let mut best: Option<(usize, f64)> = None;
    for epoch in 1..=cfg.epoch_num {
        let train_loss = job.train_epoch()?;
        let dev_metric = job.dev_metric()?;
        info!("epoch {epoch}: train loss {train_loss:.6}, dev {} {dev_metric:.4}", job.dev_metric_name());
        if best.is_none_or(|(_, m)| dev_metric > m) {
            job.save(&cfg.checkpoint_dir)?;
            best = Some((epoch, dev_metric));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            dev_metric,
        });
    }
    let (best_epoch, best_dev_metric) = best.expect("at least one epoch");
    let report = TrainReport {
        app_name: app.to_string(),
        dev_metric_name: job.dev_metric_name().to_string(),
        epochs,
        best_epoch,
        best_dev_metric,
        wall_time_secs: start.elapsed().as_secs_f64(),
        checkpoint_dir: cfg.checkpoint_dir.display().to_string(),
        extra: job.extras()?,
    };
    save_train_report(&cfg.checkpoint_dir, &report)?;
    Ok(report)
}

pub fn run_train(cfg: &CliConfig) -> Result<TrainReport, CliError> {
    let app = cfg.app_name.ok_or_else(|| CliError::usage("app_name", "required for training"))?;
    let schema = parse_schema(cfg.input_schema.as_deref())?;
    let train = read_records(&cfg.tables[0], &schema)?;
    let dev = read_records(&cfg.tables[1], &schema)?;
    if train.is_empty() {
        return Err(easynlp_core::Error::Domain("training table is empty".into())).context("--tables");
    }
    match app.kind() {
        AppKind::Classifier => classify::train(cfg, app, &schema, &train, &dev),
        AppKind::LanguageModel | AppKind::Knowledge => lm::train(cfg, app, &schema, &train, &dev),
        AppKind::FewShot => fewshot::train(cfg, app, &schema, &train, &dev),
        AppKind::Distill => distill::train(cfg, app, &schema, &train, &dev),
    }
}

/// The app recorded in the checkpoint, checked against `--app_name`.
fn resolve_app(cfg: &CliConfig, state: &AppState) -> Result<AppName, CliError> {
    let recorded: AppName = state
        .app_name
        .parse()
        .map_err(|e: String| easynlp_core::Error::Format(e))
        .context("app_state.json")?;
    match cfg.app_name {
        Some(a) if a != recorded => Err(CliError::usage(
            "app_name",
            format!("checkpoint was trained by {recorded}, not {a}"),
        )),
        _ => Ok(recorded),
    }
}

/// Column choices for evaluate/predict: flags override the checkpoint's.
fn input_columns(cfg: &CliConfig, state: &AppState) -> (String, Option<String>, Option<String>) {
    (
        cfg.first_sequence.clone().unwrap_or_else(|| state.first_sequence.clone()),
        cfg.second_sequence.clone().or_else(|| state.second_sequence.clone()),
        cfg.label_name.clone().or_else(|| state.label_name.clone()),
    )
}

pub fn run_evaluate(cfg: &CliConfig) -> Result<EvalReport, CliError> {
    let dir = &cfg.checkpoint_dir;
    let state = crate::state::load_app_state(dir)?;
    let app = resolve_app(cfg, &state)?;
    let schema = parse_schema(Some(cfg.input_schema.as_deref().unwrap_or(&state.input_schema)))?;
    let records = read_records(&cfg.tables[0], &schema)?;
    if records.is_empty() {
        return Err(easynlp_core::Error::Domain("evaluation table is empty".into())).context("--tables");
    }
    let metrics = match app.kind() {
        AppKind::Classifier | AppKind::Distill => classify::evaluate(cfg, &state, &schema, &records)?,
        AppKind::FewShot => fewshot::evaluate(cfg, &state, &schema, &records)?,
        AppKind::LanguageModel | AppKind::Knowledge => lm::evaluate(cfg, &state, &schema, &records)?,
    };
    let report = EvalReport {
        app_name: app.to_string(),
        table: cfg.tables[0].display().to_string(),
        num_examples: records.len(),
        metrics,
    };
    let out = cfg.outputs.clone().unwrap_or_else(|| dir.join("eval_results.json"));
    crate::state::save_eval_report(&out, &report)?;
    Ok(report)
}

/// Writes the input columns plus `predicted` and one `prob_<label>` column
/// per class. Returns the number of rows written.
pub fn run_predict(cfg: &CliConfig) -> Result<usize, CliError> {
    let dir = &cfg.checkpoint_dir;
    let state = crate::state::load_app_state(dir)?;
    let app = resolve_app(cfg, &state)?;
    if matches!(app.kind(), AppKind::LanguageModel | AppKind::Knowledge) {
        return Err(CliError::usage("mode", format!("{app} has no class predictions; use evaluate")));
    }
    let schema = parse_schema(Some(cfg.input_schema.as_deref().unwrap_or(&state.input_schema)))?;
    let records = read_records(&cfg.tables[0], &schema)?;
    let label_map = crate::state::load_label_map(dir)?
        .ok_or_else(|| easynlp_core::Error::Format("checkpoint has no label_map.json".into()))
        .context("--checkpoint_dir")?;
    let probs = match app.kind() {
        AppKind::Classifier | AppKind::Distill => classify::probabilities(cfg, &state, &schema, &records)?,
        AppKind::FewShot => fewshot::probabilities(cfg, &state, &records)?,
        AppKind::LanguageModel | AppKind::Knowledge => unreachable!("rejected above"),
    };
    let out = cfg.outputs.as_ref().ok_or_else(|| CliError::usage("outputs", "required for predict"))?;
    write_predictions(out, &records, &schema, &label_map, &probs)?;
    Ok(records.len())
}

/// Schema of the prediction file: the input schema plus `predicted` and the
/// per-class probability columns.
pub fn prediction_schema(schema: &DatasetSchema, labels: &LabelMap) -> easynlp_core::Result<DatasetSchema> {
    use easynlp_core::data_hub::{Column, ColumnKind};
    let mut extra = vec![Column {
        name: "predicted".into(),
        kind: ColumnKind::Str,
        arity: 1,
    }];
    extra.extend(labels.labels().iter().map(|l| Column {
        name: format!("prob_{l}"),
        kind: ColumnKind::Float,
        arity: 1,
    }));
    schema.extended(extra)
}

fn write_predictions(
    path: &Path,
    records: &[Record],
    schema: &DatasetSchema,
    labels: &LabelMap,
    probs: &[Vec<f64>],
) -> Result<(), CliError> {
    use easynlp_core::data_hub::{write_table, Value};
    let out_schema = prediction_schema(schema, labels).context("--outputs")?;
    let rows: Vec<Record> = records
        .iter()
        .zip(probs)
        .map(|(r, p)| {
            let mut row = r.clone();
            let best = easynlp_core::metrics::argmax(p);
            row.values.insert("predicted".into(), Value::Str(labels.label(best).unwrap_or("").to_string()));
            for (l, x) in labels.labels().iter().zip(p) {
                row.values.insert(format!("prob_{l}"), Value::Str(format!("{x:.6}")));
            }
            row
        })
        .collect();
    write_table(path, &rows, &out_schema).context("--outputs")
}

fn parse_schema(spec: Option<&str>) -> Result<DatasetSchema, CliError> {
    let spec = spec.ok_or_else(|| CliError::usage("input_schema", "required"))?;
    DatasetSchema::parse(spec).context("--input_schema")
}

fn read_records(path: &Path, schema: &DatasetSchema) -> Result<Vec<Record>, CliError> {
    read_table(path, schema).context(&format!("--tables ({})", path.display()))
}

fn label_map(cfg: &CliConfig) -> Result<LabelMap, CliError> {
    let values = cfg
        .label_enumerate_values
        .as_ref()
        .ok_or_else(|| CliError::usage("label_enumerate_values", "required"))?;
    LabelMap::new(values.iter().cloned()).context("--label_enumerate_values")
}

fn text_columns(cfg: &CliConfig) -> Vec<String> {
    cfg.first_sequence.iter().chain(&cfg.second_sequence).cloned().collect()
}

fn app_state(cfg: &CliConfig, app: AppName, fewshot: Option<crate::state::FewShotState>) -> AppState {
    AppState {
        app_name: app.to_string(),
        input_schema: cfg.input_schema.clone().unwrap_or_default(),
        first_sequence: cfg.first_sequence.clone().unwrap_or_default(),
        second_sequence: cfg.second_sequence.clone(),
        label_name: cfg.label_name.clone(),
        sequence_length: cfg.sequence_length,
        fewshot,
    }
}

/// Checkpoint files shared by every app.
fn save_common(
    dir: &Path,
    model: &TransformerModel,
    vocab: &Vocabulary,
    labels: Option<&LabelMap>,
    state: &AppState,
) -> Result<(), CliError> {
    save_checkpoint(model, vocab, dir).context("--checkpoint_dir")?;
    if let Some(l) = labels {
        save_label_map(dir, l)?;
    }
    save_app_state(dir, state)
}

/// Backbone named by `key` (a zoo name or a checkpoint directory).
///
/// A zoo name gives a fresh model over a vocabulary built from `texts`; a
/// checkpoint keeps its vocabulary and warm-starts every parameter whose
/// name and shape still match (heads resized for new label or relation
/// counts start fresh).
fn backbone(
    cfg: &CliConfig,
    key: &str,
    default: &str,
    texts: &[String],
    num_classes: usize,
    num_relations: usize,
) -> Result<(TransformerModel, Vocabulary), CliError> {
    let flag = format!("--user_defined_parameters {key}");
    let name = cfg.user_param(key).unwrap_or(default);
    if let Some(mut mc) = zoo_config(name) {
        let vocab = build_vocab(texts, 1).context("vocabulary")?;
        mc.vocab_size = vocab.len();
        mc.max_position = cfg.sequence_length;
        mc.num_classes = num_classes;
        mc.num_relations = num_relations;
        let model = TransformerModel::init(&mc, cfg.seed).context(&flag)?;
        return Ok((model, vocab));
    }
    let path = Path::new(name);
    if !path.is_dir() {
        return Err(CliError::usage(
            "user_defined_parameters",
            format!("{key}={name} is neither a zoo model ({}) nor a checkpoint directory", ZOO_NAMES.join(", ")),
        ));
    }
    let (source, vocab) = load_checkpoint(path).context(&flag)?;
    let mut mc = source.config().clone();
    mc.num_classes = num_classes;
    mc.num_relations = num_relations;
    let mut model = TransformerModel::init(&mc, cfg.seed).context(&flag)?;
    let fresh = model.warm_start_from(&source);
    if !fresh.is_empty() {
        info!("warm start from {name}: freshly initialised {}", fresh.join(", "));
    }
    Ok((model, vocab))
}

/// Longest input the model can take under `--sequence_length`.
fn max_len(cfg: &CliConfig, model: &TransformerModel) -> usize {
    cfg.sequence_length.min(model.config().max_position)
}

/// Whitespace tokens of extra strings that must be in a fresh vocabulary.
fn extra_tokens(items: &[&str]) -> Vec<String> {
    items.iter().flat_map(|s| tokenize(s)).collect()
}

/// A user-defined parameter parsed as `T`, or `default` when absent.
fn param<T: std::str::FromStr>(cfg: &CliConfig, key: &str, default: T) -> Result<T, CliError> {
    match cfg.user_param(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|_| CliError::usage("user_defined_parameters", format!("{key}={raw} is malformed"))),
    }
}

fn required_param<'c>(cfg: &'c CliConfig, key: &str) -> Result<&'c str, CliError> {
    cfg.user_param(key)
        .ok_or_else(|| CliError::usage("user_defined_parameters", format!("{key}=... is required")))
}
