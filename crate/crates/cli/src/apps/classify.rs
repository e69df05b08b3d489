//! text_classify and text_match.

use std::collections::BTreeMap;
use std::path::Path;

use easynlp_core::data_hub::{encode_records, record_texts, DatasetSchema, EncodedDataset, InputSpec, LabelMap, Record, Task};
use easynlp_core::metrics::{accuracy, argmax, macro_f1};
use easynlp_core::model_zoo::{load_checkpoint, TransformerModel};
use easynlp_core::tokenization::Vocabulary;
use easynlp_core::train::{class_probabilities, classification_accuracy, train_classifier_epoch};
use easynlp_core::{AdamConfig, AdamState, Rng};

use super::{app_state, backbone, drive, input_columns, label_map, max_len, save_common, text_columns, Job, DEFAULT_BACKBONE};
use crate::config::{AppName, CliConfig};
use crate::error::{CliError, Context};
use crate::state::{load_label_map, AppState, TrainReport};

/// Pair encoding whenever a second column is named.
pub(super) fn task_for(second: Option<&String>) -> Task {
    if second.is_some() {
        Task::TextMatch
    } else {
        Task::TextClassify
    }
}

struct ClassifierJob<'a> {
    cfg: &'a CliConfig,
    state: AppState,
    labels: LabelMap,
    model: TransformerModel,
    vocab: Vocabulary,
    train: EncodedDataset,
    dev: EncodedDataset,
    adam: AdamState,
    rng: Rng,
}

impl Job for ClassifierJob<'_> {
    fn dev_metric_name(&self) -> &'static str {
        "accuracy"
    }

    fn train_epoch(&mut self) -> Result<f64, CliError> {
        train_classifier_epoch(&mut self.model, &mut self.adam, &self.train, self.cfg.batch_size, &mut self.rng, None)
            .context("training")
    }

    fn dev_metric(&mut self) -> Result<f64, CliError> {
        classification_accuracy(&self.model, &self.dev, self.cfg.batch_size).context("dev evaluation")
    }

    fn save(&mut self, dir: &Path) -> Result<(), CliError> {
        save_common(dir, &self.model, &self.vocab, Some(&self.labels), &self.state)
    }
}

pub(super) fn train(
    cfg: &CliConfig,
    app: AppName,
    schema: &DatasetSchema,
    train: &[Record],
    dev: &[Record],
) -> Result<TrainReport, CliError> {
    let labels = label_map(cfg)?;
    let columns = text_columns(cfg);
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let texts: Vec<String> = record_texts(train, &cols).into_iter().map(str::to_string).collect();
    let (model, vocab) = backbone(cfg, "pretrain_model_name_or_path", DEFAULT_BACKBONE, &texts, labels.len(), 0)?;
    let spec = InputSpec {
        task: task_for(cfg.second_sequence.as_ref()),
        first_sequence: cfg.first_sequence.clone().unwrap_or_default(),
        second_sequence: cfg.second_sequence.clone(),
        label_name: cfg.label_name.clone(),
        max_len: max_len(cfg, &model),
    };
    let train = encode_records(train, schema, &vocab, &spec, Some(&labels)).context("training table")?;
    let dev = encode_records(dev, schema, &vocab, &spec, Some(&labels)).context("dev table")?;
    if dev.is_empty() {
        return Err(easynlp_core::Error::Domain("dev table is empty".into())).context("--tables");
    }
    let mut job = ClassifierJob {
        cfg,
        state: app_state(cfg, app, None),
        labels,
        adam: AdamState::new(model.params(), AdamConfig::with_lr(cfg.learning_rate)),
        rng: Rng::new(cfg.seed),
        model,
        vocab,
        train,
        dev,
    };
    drive(&mut job, cfg, app)
}

/// Encodes `records` for a saved classifier; labels only when the label
/// column is present in the schema and configured.
fn encode_for(
    cfg: &CliConfig,
    state: &AppState,
    schema: &DatasetSchema,
    records: &[Record],
    with_labels: bool,
) -> Result<(TransformerModel, EncodedDataset, Option<LabelMap>), CliError> {
    let (model, vocab) = load_checkpoint(&cfg.checkpoint_dir).context("--checkpoint_dir")?;
    let labels = load_label_map(&cfg.checkpoint_dir)?;
    let (first, second, label_name) = input_columns(cfg, state);
    let spec = InputSpec {
        task: task_for(second.as_ref()),
        first_sequence: first,
        second_sequence: second,
        label_name: if with_labels { label_name } else { None },
        max_len: cfg.sequence_length.min(state.sequence_length).min(model.config().max_position),
    };
    let data = encode_records(records, schema, &vocab, &spec, labels.as_ref()).context("--tables")?;
    Ok((model, data, labels))
}

/// Accuracy and macro-F1 of the argmax predictions.
pub(super) fn score(probs: &[Vec<f64>], gold: &[usize], num_classes: usize) -> Result<BTreeMap<String, f64>, CliError> {
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let mut m = BTreeMap::new();
    m.insert("accuracy".into(), accuracy(&pred, gold).context("metrics")?);
    m.insert("macro_f1".into(), macro_f1(&pred, gold, num_classes).context("metrics")?);
    Ok(m)
}

pub(super) fn gold_labels(data: &EncodedDataset) -> Result<Vec<usize>, CliError> {
    data.all_labels()
        .ok_or_else(|| CliError::usage("label_name", "evaluation needs a label column in the table"))
}

pub(super) fn evaluate(
    cfg: &CliConfig,
    state: &AppState,
    schema: &DatasetSchema,
    records: &[Record],
) -> Result<BTreeMap<String, f64>, CliError> {
    let (model, data, _) = encode_for(cfg, state, schema, records, true)?;
    let gold = gold_labels(&data)?;
    let probs = class_probabilities(&model, &data, cfg.batch_size).context("evaluation")?;
    score(&probs, &gold, model.config().num_classes)
}

pub(super) fn probabilities(
    cfg: &CliConfig,
    state: &AppState,
    schema: &DatasetSchema,
    records: &[Record],
) -> Result<Vec<Vec<f64>>, CliError> {
    let (model, data, _) = encode_for(cfg, state, schema, records, false)?;
    class_probabilities(&model, &data, cfg.batch_size).context("prediction")
}
