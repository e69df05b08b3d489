//! distill_kd and distill_metakd.

use std::collections::BTreeMap;
use std::path::Path;

use easynlp_core::data_hub::{encode_records, record_texts, DatasetSchema, EncodedDataset, InputSpec, LabelMap, Record};
use easynlp_core::distill::{
    augment_records, domain_expertise, extract_teacher_logits, fit_meta_teacher, Guidance, KdConfig, Projection,
    StudentTrainer, TeacherCache, TrainConfig,
};
use easynlp_core::model_zoo::{load_checkpoint, save_checkpoint, zoo_config, TransformerModel, ZOO_NAMES};
use easynlp_core::tokenization::Vocabulary;
use easynlp_core::train::classification_accuracy;

use super::classify::task_for;
use super::{
    app_state, backbone, drive, label_map, param, required_param, save_common, text_columns, Job, DEFAULT_BACKBONE,
    DEFAULT_STUDENT,
};
use crate::config::{AppName, CliConfig};
use crate::error::{CliError, Context};
use crate::state::{save_label_map, AppState, TrainReport};

pub const TEACHER_CACHE_FILE: &str = "teacher.cache";
pub const META_TEACHER_DIR: &str = "meta_teacher";

/// Student over the teacher's vocabulary: a zoo name gives a fresh model,
/// a checkpoint directory must share the vocabulary.
fn student_model(cfg: &CliConfig, vocab: &Vocabulary, num_classes: usize) -> Result<TransformerModel, CliError> {
    let name = cfg.user_param("student_model").unwrap_or(DEFAULT_STUDENT);
    let flag = "--user_defined_parameters student_model";
    if let Some(mut mc) = zoo_config(name) {
        mc.vocab_size = vocab.len();
        mc.max_position = cfg.sequence_length;
        mc.num_classes = num_classes;
        return TransformerModel::init(&mc, cfg.seed).context(flag);
    }
    if !Path::new(name).is_dir() {
        return Err(CliError::usage(
            "user_defined_parameters",
            format!("student_model={name} is neither a zoo model ({}) nor a checkpoint directory", ZOO_NAMES.join(", ")),
        ));
    }
    let (source, svocab) = load_checkpoint(Path::new(name)).context(flag)?;
    if svocab.tokens() != vocab.tokens() {
        return Err(easynlp_core::Error::Config("student and teacher vocabularies differ".into())).context(flag);
    }
    let mut mc = source.config().clone();
    mc.num_classes = num_classes;
    let mut model = TransformerModel::init(&mc, cfg.seed).context(flag)?;
    model.warm_start_from(&source);
    Ok(model)
}

fn spec(cfg: &CliConfig, max_len: usize) -> InputSpec {
    InputSpec {
        task: task_for(cfg.second_sequence.as_ref()),
        first_sequence: cfg.first_sequence.clone().unwrap_or_default(),
        second_sequence: cfg.second_sequence.clone(),
        label_name: cfg.label_name.clone(),
        max_len,
    }
}

fn kd_config(cfg: &CliConfig) -> Result<KdConfig, CliError> {
    let d = KdConfig::default();
    let kd = KdConfig {
        temperature: param(cfg, "temperature", d.temperature)?,
        alpha: param(cfg, "alpha", d.alpha)?,
        feature_beta: param(cfg, "feature_beta", d.feature_beta)?,
    };
    kd.validate().context("--user_defined_parameters")?;
    Ok(kd)
}

fn train_config(cfg: &CliConfig) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epoch_num,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        seed: cfg.seed,
    }
}

struct StudentJob<'a> {
    cfg: &'a CliConfig,
    state: AppState,
    labels: LabelMap,
    vocab: &'a Vocabulary,
    student: TransformerModel,
    projection: Option<Projection>,
    trainer: StudentTrainer<'a>,
    dev: EncodedDataset,
    extras: BTreeMap<String, f64>,
}

impl Job for StudentJob<'_> {
    fn dev_metric_name(&self) -> &'static str {
        "accuracy"
    }

    fn train_epoch(&mut self) -> Result<f64, CliError> {
        self.trainer.epoch(&mut self.student, self.projection.as_mut()).context("student training")
    }

    fn dev_metric(&mut self) -> Result<f64, CliError> {
        classification_accuracy(&self.student, &self.dev, self.cfg.batch_size).context("dev evaluation")
    }

    fn save(&mut self, dir: &Path) -> Result<(), CliError> {
        save_common(dir, &self.student, self.vocab, Some(&self.labels), &self.state)
    }

    fn extras(&mut self) -> Result<BTreeMap<String, f64>, CliError> {
        Ok(self.extras.clone())
    }
}

pub(super) fn train(
    cfg: &CliConfig,
    app: AppName,
    schema: &DatasetSchema,
    train: &[Record],
    dev: &[Record],
) -> Result<TrainReport, CliError> {
    match app {
        AppName::DistillMetakd => train_metakd(cfg, app, schema, train, dev),
        _ => train_kd(cfg, app, schema, train, dev),
    }
}

fn extract_cache(cfg: &CliConfig, teacher: &TransformerModel, data: &EncodedDataset, ids: &[u64]) -> Result<TeacherCache, CliError> {
    let cache = extract_teacher_logits(teacher, data, ids, cfg.batch_size).context("teacher logits")?;
    std::fs::create_dir_all(&cfg.checkpoint_dir)
        .map_err(easynlp_core::Error::from)
        .context("--checkpoint_dir")?;
    cache.save(&cfg.checkpoint_dir.join(TEACHER_CACHE_FILE)).context("teacher cache")?;
    Ok(cache)
}

fn train_kd(
    cfg: &CliConfig,
    app: AppName,
    schema: &DatasetSchema,
    train: &[Record],
    dev: &[Record],
) -> Result<TrainReport, CliError> {
    let labels = label_map(cfg)?;
    let teacher_dir = required_param(cfg, "teacher")?;
    let (teacher, vocab) = load_checkpoint(Path::new(teacher_dir)).context("--user_defined_parameters teacher")?;
    if teacher.config().num_classes != labels.len() {
        return Err(easynlp_core::Error::Config(format!(
            "teacher predicts {} classes, --label_enumerate_values lists {}",
            teacher.config().num_classes,
            labels.len()
        )))
        .context("--user_defined_parameters teacher");
    }
    let student = student_model(cfg, &vocab, labels.len())?;
    let len = cfg
        .sequence_length
        .min(student.config().max_position)
        .min(teacher.config().max_position);
    let columns = text_columns(cfg);
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let augmented = augment_records(train, &cols, &vocab, param(cfg, "n_aug", 0usize)?, cfg.seed).context("augmentation")?;
    let s = spec(cfg, len);
    let data = encode_records(&augmented, schema, &vocab, &s, Some(&labels)).context("training table")?;
    let dev = encode_records(dev, schema, &vocab, &s, Some(&labels)).context("dev table")?;
    if dev.is_empty() {
        return Err(easynlp_core::Error::Domain("dev table is empty".into())).context("--tables");
    }
    let ids: Vec<u64> = (0..data.len() as u64).collect();
    let cache = extract_cache(cfg, &teacher, &data, &ids)?;
    let guidance = Guidance::Kd {
        cache: &cache,
        cfg: kd_config(cfg)?,
    };
    let trainer = StudentTrainer::new(&student, None, &data, &ids, guidance, &train_config(cfg)).context("student training")?;
    let mut extras = BTreeMap::new();
    extras.insert("teacher_params".into(), teacher.num_params() as f64);
    extras.insert("student_params".into(), student.num_params() as f64);
    extras.insert("train_examples".into(), data.len() as f64);
    extras.insert(
        "teacher_dev_accuracy".into(),
        classification_accuracy(&teacher, &dev, cfg.batch_size).context("teacher evaluation")?,
    );
    let mut job = StudentJob {
        cfg,
        state: app_state(cfg, app, None),
        labels,
        vocab: &vocab,
        student,
        projection: None,
        trainer,
        dev,
        extras,
    };
    drive(&mut job, cfg, app)
}

fn domain_ids(records: &[Record], column: &str, names: &[String]) -> Result<Vec<usize>, CliError> {
    records
        .iter()
        .map(|r| {
            let d = r.text(column)?;
            names
                .iter()
                .position(|n| n == d)
                .ok_or_else(|| easynlp_core::Error::Domain(format!("domain {d:?} does not occur in the training table")))
        })
        .collect::<easynlp_core::Result<_>>()
        .context("domain_column")
}

fn subset(data: &EncodedDataset, keep: impl Fn(usize) -> bool) -> EncodedDataset {
    let rows: Vec<usize> = (0..data.len()).filter(|&i| keep(i)).collect();
    EncodedDataset {
        seqs: rows.iter().map(|&i| data.seqs[i].clone()).collect(),
        labels: rows.iter().map(|&i| data.labels[i]).collect(),
    }
}

/// Meta-teacher on the union of domains, per-domain expertise on the dev
/// table, then a student distilled with the expertise-gated objective.
fn train_metakd(
    cfg: &CliConfig,
    app: AppName,
    schema: &DatasetSchema,
    train: &[Record],
    dev: &[Record],
) -> Result<TrainReport, CliError> {
    let labels = label_map(cfg)?;
    let column = cfg.user_param("domain_column").unwrap_or("domain");
    let mut names: Vec<String> = train.iter().map(|r| r.text(column).map(str::to_string)).collect::<easynlp_core::Result<_>>().context("domain_column")?;
    names.sort();
    names.dedup();
    let train_dom = domain_ids(train, column, &names)?;
    let dev_dom = domain_ids(dev, column, &names)?;

    let columns = text_columns(cfg);
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let texts: Vec<String> = record_texts(train, &cols).into_iter().map(str::to_string).collect();
    let key = if cfg.user_param("teacher").is_some() { "teacher" } else { "teacher_model" };
    let (mut teacher, vocab) = backbone(cfg, key, DEFAULT_BACKBONE, &texts, labels.len(), 0)?;
    let student = student_model(cfg, &vocab, labels.len())?;
    let len = cfg
        .sequence_length
        .min(student.config().max_position)
        .min(teacher.config().max_position);
    let s = spec(cfg, len);
    let train_all = encode_records(train, schema, &vocab, &s, Some(&labels)).context("training table")?;
    let dev_all = encode_records(dev, schema, &vocab, &s, Some(&labels)).context("dev table")?;

    let tcfg = TrainConfig {
        epochs: param(cfg, "teacher_epochs", cfg.epoch_num)?,
        learning_rate: param(cfg, "teacher_learning_rate", cfg.learning_rate)?,
        ..train_config(cfg)
    };
    fit_meta_teacher(&mut teacher, &train_all, &train_dom, &tcfg).context("meta-teacher training")?;
    let teacher_dir = cfg.checkpoint_dir.join(META_TEACHER_DIR);
    std::fs::create_dir_all(&teacher_dir)
        .map_err(easynlp_core::Error::from)
        .context("--checkpoint_dir")?;
    save_checkpoint(&teacher, &vocab, &teacher_dir).context("meta-teacher checkpoint")?;
    save_label_map(&teacher_dir, &labels)?;

    let mut extras = BTreeMap::new();
    let mut expertise = vec![0.0; names.len()];
    for (d, name) in names.iter().enumerate() {
        let held_out = subset(&dev_all, |i| dev_dom[i] == d);
        let held_out = if held_out.is_empty() { subset(&train_all, |i| train_dom[i] == d) } else { held_out };
        expertise[d] = domain_expertise(&teacher, &held_out).context("domain expertise")?;
        extras.insert(format!("expertise_{name}"), expertise[d]);
    }

    let target = match cfg.user_param("target_domain") {
        Some(t) => Some(
            names
                .iter()
                .position(|n| n == t)
                .ok_or_else(|| CliError::usage("user_defined_parameters", format!("target_domain={t} is not in the training table")))?,
        ),
        None => None,
    };
    let in_target = |d: usize| target.is_none_or(|t| t == d);
    let data = subset(&train_all, |i| in_target(train_dom[i]));
    let dev = subset(&dev_all, |i| in_target(dev_dom[i]));
    if data.is_empty() || dev.is_empty() {
        return Err(easynlp_core::Error::Domain("no training or dev rows in the target domain".into())).context("--tables");
    }
    let t_d: Vec<f64> = (0..train_all.len())
        .filter(|&i| in_target(train_dom[i]))
        .map(|i| expertise[train_dom[i]])
        .collect();
    let ids: Vec<u64> = (0..data.len() as u64).collect();
    let cache = extract_cache(cfg, &teacher, &data, &ids)?;
    let projection = Projection::new(student.config().hidden_dim, teacher.config().hidden_dim, cfg.seed).context("projection")?;
    let guidance = Guidance::Meta {
        cache: &cache,
        cfg: kd_config(cfg)?,
        t_d: &t_d,
    };
    let trainer =
        StudentTrainer::new(&student, Some(&projection), &data, &ids, guidance, &train_config(cfg)).context("student training")?;
    extras.insert("teacher_params".into(), teacher.num_params() as f64);
    extras.insert("student_params".into(), student.num_params() as f64);
    extras.insert(
        "teacher_dev_accuracy".into(),
        classification_accuracy(&teacher, &dev, cfg.batch_size).context("teacher evaluation")?,
    );
    let mut job = StudentJob {
        cfg,
        state: app_state(cfg, app, None),
        labels,
        vocab: &vocab,
        student,
        projection: Some(projection),
        trainer,
        dev,
        extras,
    };
    drive(&mut job, cfg, app)
}
