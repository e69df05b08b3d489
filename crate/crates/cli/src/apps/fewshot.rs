//! fewshot_pet, fewshot_ptuning and fewshot_cp.

use std::collections::BTreeMap;
use std::path::Path;

use easynlp_core::data_hub::{DatasetSchema, LabelMap, Record};
use easynlp_core::fewshot::{
    apply_template_record, ClassCentroids, ContinuousPrompt, FewShotConfig, FewShotMethod, FewShotModel, FewShotTrainer,
    PromptTemplate, Prompted, Verbalizer,
};
use easynlp_core::metrics::accuracy;
use easynlp_core::model_zoo::load_checkpoint;
use easynlp_core::tokenization::Vocabulary;
use easynlp_core::Tensor;

use super::classify::score;
use super::{
    app_state, backbone, drive, extra_tokens, input_columns, label_map, max_len, param, text_columns, Job, DEFAULT_BACKBONE,
};
use crate::config::{AppName, CliConfig};
use crate::error::{CliError, Context};
use crate::state::{load_label_map, save_app_state, save_label_map, AppState, FewShotState, TrainReport};

/// Default templates by method and number of inputs.
pub fn default_template(method: FewShotMethod, pair: bool) -> &'static str {
    match (method, pair) {
        (FewShotMethod::PTuning, false) => "{p*2} {input} {mask}",
        (FewShotMethod::PTuning, true) => "{p*2} {input} {mask} {input}",
        (_, false) => "{input} it was {mask} .",
        (_, true) => "{input} ? {mask} , {input}",
    }
}

fn method_of(app: AppName) -> FewShotMethod {
    match app {
        AppName::FewshotPtuning => FewShotMethod::PTuning,
        AppName::FewshotCp => FewShotMethod::Cp,
        _ => FewShotMethod::Pet,
    }
}

fn method_name(m: FewShotMethod) -> &'static str {
    match m {
        FewShotMethod::Pet => "pet",
        FewShotMethod::PTuning => "ptuning",
        FewShotMethod::Cp => "cp",
    }
}

/// `template=` uses `|` between words since parameters are space-separated.
fn template_param(cfg: &CliConfig, method: FewShotMethod) -> Result<PromptTemplate, CliError> {
    let raw = match cfg.user_param("template") {
        Some(t) => t.replace('|', " "),
        None => default_template(method, cfg.second_sequence.is_some()).to_string(),
    };
    raw.parse().context("--user_defined_parameters template")
}

/// `verbalizer=` lists one label word per class, comma-separated, in label order.
fn verbalizer_words(cfg: &CliConfig, method: FewShotMethod, labels: &LabelMap) -> Result<Option<Vec<String>>, CliError> {
    let Some(raw) = cfg.user_param("verbalizer") else {
        if method == FewShotMethod::Cp {
            return Ok(None);
        }
        return Err(CliError::usage("user_defined_parameters", "verbalizer=word,word,... is required for cloze training"));
    };
    let words: Vec<String> = raw.split(',').map(|w| w.trim().to_lowercase()).collect();
    if words.len() != labels.len() {
        return Err(CliError::usage(
            "user_defined_parameters",
            format!("verbalizer has {} words for {} labels", words.len(), labels.len()),
        ));
    }
    Ok(Some(words))
}

fn prompted(
    records: &[Record],
    template: &PromptTemplate,
    columns: &[&str],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<Prompted>, CliError> {
    records
        .iter()
        .map(|r| apply_template_record(template, r, columns, vocab, max_len))
        .collect::<easynlp_core::Result<_>>()
        .context("--tables")
}

fn label_ids(records: &[Record], label_name: &str, labels: &LabelMap) -> Result<Vec<usize>, CliError> {
    records
        .iter()
        .map(|r| {
            let v = r
                .get(label_name)
                .ok_or_else(|| easynlp_core::Error::Schema(format!("record has no column {label_name:?}")))?;
            labels.id(&v.render())
        })
        .collect::<easynlp_core::Result<_>>()
        .context("--label_name")
}

fn fewshot_state(template: &PromptTemplate, words: &Option<Vec<String>>, m: &FewShotModel) -> FewShotState {
    FewShotState {
        method: method_name(m.method).to_string(),
        template: template.to_string(),
        verbalizer: words.clone(),
        prompt: m.prompt.as_ref().map(|p| p.rows().data().chunks(p.rows().shape()[1]).map(<[f64]>::to_vec).collect()),
        centroids: m.centroids.as_ref().map(|c| c.rows().to_vec()),
    }
}

struct FewShotJob<'a> {
    cfg: &'a CliConfig,
    app: AppName,
    labels: LabelMap,
    vocab: Vocabulary,
    template: PromptTemplate,
    words: Option<Vec<String>>,
    trainer: FewShotTrainer,
    train: Vec<Prompted>,
    train_y: Vec<usize>,
    dev: Vec<Prompted>,
    dev_y: Vec<usize>,
    current: Option<FewShotModel>,
}

impl Job for FewShotJob<'_> {
    fn dev_metric_name(&self) -> &'static str {
        "accuracy"
    }

    fn train_epoch(&mut self) -> Result<f64, CliError> {
        self.current = None;
        self.trainer.epoch(&self.train, &self.train_y).context("few-shot training")
    }

    fn dev_metric(&mut self) -> Result<f64, CliError> {
        let m = self.trainer.snapshot(&self.train, &self.train_y).context("few-shot snapshot")?;
        let pred = m.predict(&self.dev, self.cfg.batch_size).context("dev evaluation")?;
        self.current = Some(m);
        accuracy(&pred, &self.dev_y).context("dev evaluation")
    }

    fn save(&mut self, dir: &Path) -> Result<(), CliError> {
        let m = match &self.current {
            Some(m) => m,
            None => self.current.insert(self.trainer.snapshot(&self.train, &self.train_y).context("few-shot snapshot")?),
        };
        easynlp_core::model_zoo::save_checkpoint(&m.model, &self.vocab, dir).context("--checkpoint_dir")?;
        save_label_map(dir, &self.labels)?;
        let state = app_state(self.cfg, self.app, Some(fewshot_state(&self.template, &self.words, m)));
        save_app_state(dir, &state)
    }
}

pub(super) fn train(
    cfg: &CliConfig,
    app: AppName,
    _schema: &DatasetSchema,
    train: &[Record],
    dev: &[Record],
) -> Result<TrainReport, CliError> {
    let method = method_of(app);
    let labels = label_map(cfg)?;
    let template = template_param(cfg, method)?;
    let words = verbalizer_words(cfg, method, &labels)?;
    let columns = text_columns(cfg);
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut texts: Vec<String> = easynlp_core::data_hub::record_texts(train, &cols)
        .into_iter()
        .map(str::to_string)
        .collect();
    let template_text = template.to_string();
    let mut extra: Vec<&str> = vec![template_text.as_str()];
    extra.extend(words.iter().flatten().map(String::as_str));
    texts.push(extra_tokens(&extra).join(" "));
    let (model, vocab) = backbone(cfg, "pretrain_model_name_or_path", DEFAULT_BACKBONE, &texts, labels.len(), 0)?;
    let verbalizer = words
        .as_ref()
        .map(|w| Verbalizer::from_words(w, &vocab))
        .transpose()
        .context("--user_defined_parameters verbalizer")?;
    let prompt = match template.prompt_len() {
        0 => None,
        k => Some(ContinuousPrompt::random(k, model.config().hidden_dim, cfg.seed).context("prompt")?),
    };
    let len = max_len(cfg, &model);
    let label_name = cfg
        .label_name
        .as_deref()
        .ok_or_else(|| CliError::usage("label_name", "required for few-shot training"))?;
    let train_x = prompted(train, &template, &cols, &vocab, len)?;
    let train_y = label_ids(train, label_name, &labels)?;
    let dev_x = prompted(dev, &template, &cols, &vocab, len)?;
    let dev_y = label_ids(dev, label_name, &labels)?;
    if dev_x.is_empty() {
        return Err(easynlp_core::Error::Domain("dev table is empty".into())).context("--tables");
    }
    let fcfg = FewShotConfig {
        epochs: cfg.epoch_num,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
        freeze_backbone: param(cfg, "freeze_backbone", false)?,
        ..FewShotConfig::default()
    };
    let trainer =
        FewShotTrainer::new(method, model, prompt, verbalizer, &train_x, &train_y, &fcfg).context("few-shot training")?;
    let mut job = FewShotJob {
        cfg,
        app,
        labels,
        vocab,
        template,
        words,
        trainer,
        train: train_x,
        train_y,
        dev: dev_x,
        dev_y,
        current: None,
    };
    drive(&mut job, cfg, app)
}

/// Rebuilds a trained few-shot classifier from its checkpoint directory.
pub fn fewshot_model_from_state(dir: &Path, state: &AppState) -> Result<(FewShotModel, Vocabulary, PromptTemplate), CliError> {
    let fs = state
        .fewshot
        .as_ref()
        .ok_or_else(|| easynlp_core::Error::Format("app_state.json has no few-shot section".into()))
        .context("app_state.json")?;
    let (model, vocab) = load_checkpoint(dir).context("--checkpoint_dir")?;
    let method: FewShotMethod = fs.method.parse().context("app_state.json")?;
    let template: PromptTemplate = fs.template.parse().context("app_state.json")?;
    let verbalizer = fs
        .verbalizer
        .as_ref()
        .map(|w| Verbalizer::from_words(w, &vocab))
        .transpose()
        .context("app_state.json")?;
    let prompt = fs
        .prompt
        .as_ref()
        .map(|rows| Tensor::from_rows(rows).and_then(ContinuousPrompt::from_tensor))
        .transpose()
        .context("app_state.json")?;
    let centroids = fs
        .centroids
        .clone()
        .map(ClassCentroids::from_rows)
        .transpose()
        .context("app_state.json")?;
    let m = FewShotModel {
        method,
        model,
        prompt,
        verbalizer,
        centroids,
    };
    Ok((m, vocab, template))
}

fn load_prompted(
    cfg: &CliConfig,
    state: &AppState,
    records: &[Record],
) -> Result<(FewShotModel, Vec<Prompted>), CliError> {
    let (m, vocab, template) = fewshot_model_from_state(&cfg.checkpoint_dir, state)?;
    let (first, second, _) = input_columns(cfg, state);
    let cols: Vec<&str> = std::iter::once(first.as_str()).chain(second.as_deref()).collect();
    let len = cfg.sequence_length.min(state.sequence_length).min(m.model.config().max_position);
    let examples = prompted(records, &template, &cols, &vocab, len)?;
    Ok((m, examples))
}

pub(super) fn evaluate(
    cfg: &CliConfig,
    state: &AppState,
    _schema: &DatasetSchema,
    records: &[Record],
) -> Result<BTreeMap<String, f64>, CliError> {
    let labels = load_label_map(&cfg.checkpoint_dir)?
        .ok_or_else(|| easynlp_core::Error::Format("checkpoint has no label_map.json".into()))
        .context("--checkpoint_dir")?;
    let (_, _, label_name) = input_columns(cfg, state);
    let label_name = label_name.ok_or_else(|| CliError::usage("label_name", "evaluation needs a label column"))?;
    let gold = label_ids(records, &label_name, &labels)?;
    let (m, examples) = load_prompted(cfg, state, records)?;
    let probs = m.class_probabilities(&examples, cfg.batch_size).context("evaluation")?;
    score(&probs, &gold, labels.len())
}

pub(super) fn probabilities(cfg: &CliConfig, state: &AppState, records: &[Record]) -> Result<Vec<Vec<f64>>, CliError> {
    let (m, examples) = load_prompted(cfg, state, records)?;
    m.class_probabilities(&examples, cfg.batch_size).context("prediction")
}
