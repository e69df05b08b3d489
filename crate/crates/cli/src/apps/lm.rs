//! language_modeling and dkplm_pretrain.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use easynlp_core::data_hub::{
    entity_frequencies, load_triples, read_table, record_texts, relation_surface, DatasetSchema, Record, TripleStore,
};
use easynlp_core::dkplm::{
    kb_entities, knowledge_probe, majority_baseline, select_longtail_entities, LongTailPolicy, PretrainConfig, Pretrainer,
};
use easynlp_core::model_zoo::{load_checkpoint, TransformerModel};
use easynlp_core::tokenization::{encode, EntityMatcher, TokenSequence, Vocabulary};
use easynlp_core::train::masked_token_accuracy;

use super::{app_state, backbone, drive, input_columns, max_len, param, required_param, save_common, text_columns, Job, DEFAULT_BACKBONE};
use crate::config::{AppName, CliConfig};
use crate::error::{CliError, Context};
use crate::state::{AppState, TrainReport};

pub const PROBE_SCHEMA: &str = "probe:str:1,answer:str:1";

/// Cloze probes `(sentence with one [MASK], answer)` from a two-column TSV.
pub fn read_probes(path: &Path) -> Result<Vec<(String, String)>, CliError> {
    let schema = DatasetSchema::parse(PROBE_SCHEMA).context("probe schema")?;
    let what = format!("probes ({})", path.display());
    let records = read_table(path, &schema).context(&what)?;
    records
        .iter()
        .map(|r| Ok((r.text("probe")?.to_string(), r.text("answer")?.to_string())))
        .collect::<easynlp_core::Result<Vec<_>>>()
        .context(&what)
}

fn probes_from(cfg: &CliConfig) -> Result<Option<Vec<(String, String)>>, CliError> {
    cfg.user_param("probes").map(|p| read_probes(Path::new(p))).transpose()
}

fn encode_texts(vocab: &Vocabulary, texts: &[&str], max_len: usize, matcher: Option<&EntityMatcher>) -> Vec<TokenSequence> {
    texts
        .iter()
        .map(|t| {
            let mut s = encode(vocab, t, max_len);
            if let Some(m) = matcher {
                m.annotate(&mut s);
            }
            s
        })
        .collect()
}

struct LmJob<'a> {
    cfg: &'a CliConfig,
    state: AppState,
    model: TransformerModel,
    vocab: &'a Vocabulary,
    trainer: Pretrainer<'a>,
    dev: Vec<TokenSequence>,
    mask_prob: f64,
    probes: Option<Vec<(String, String)>>,
    extras: BTreeMap<String, f64>,
}

impl Job for LmJob<'_> {
    fn dev_metric_name(&self) -> &'static str {
        "masked_token_accuracy"
    }

    fn train_epoch(&mut self) -> Result<f64, CliError> {
        self.trainer.epoch(&mut self.model).context("pre-training")
    }

    fn dev_metric(&mut self) -> Result<f64, CliError> {
        let (c, t) = masked_token_accuracy(&self.model, &self.dev, self.mask_prob, self.cfg.seed, self.cfg.batch_size)
            .context("dev evaluation")?;
        Ok(if t == 0 { 0.0 } else { c as f64 / t as f64 })
    }

    fn save(&mut self, dir: &Path) -> Result<(), CliError> {
        if let Some(p) = &self.probes {
            let r = knowledge_probe(&self.model, self.vocab, p).context("probes")?;
            self.extras.insert("probe_p_at_1".into(), r.p_at_1());
        }
        save_common(dir, &self.model, self.vocab, None, &self.state)
    }

    fn extras(&mut self) -> Result<BTreeMap<String, f64>, CliError> {
        Ok(self.extras.clone())
    }
}

pub(super) fn train(
    cfg: &CliConfig,
    app: AppName,
    _schema: &DatasetSchema,
    train: &[Record],
    dev: &[Record],
) -> Result<TrainReport, CliError> {
    let columns = text_columns(cfg);
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let train_texts = record_texts(train, &cols);
    let dev_texts = record_texts(dev, &cols);
    let knowledge = app == AppName::DkplmPretrain;
    let kb = if knowledge {
        let path = required_param(cfg, "kb")?;
        load_triples(Path::new(path)).context(&format!("kb ({path})"))?
    } else {
        TripleStore::from_triples(Vec::new()).context("kb")?
    };
    let mut vocab_texts: Vec<String> = train_texts.iter().map(|s| s.to_string()).collect();
    vocab_texts.extend(
        kb.triples()
            .iter()
            .map(|t| format!("{} {} {}", t.head, relation_surface(&t.relation), t.tail)),
    );
    let (model, vocab) = backbone(cfg, "pretrain_model_name_or_path", DEFAULT_BACKBONE, &vocab_texts, 2, kb.num_relations())?;
    let len = max_len(cfg, &model);
    let names = kb_entities(&kb);
    let matcher = knowledge.then(|| EntityMatcher::new(&vocab, names.iter().map(String::as_str)));
    let corpus = encode_texts(&vocab, &train_texts, len, matcher.as_ref());
    let dev_seqs = encode_texts(&vocab, &dev_texts, len, None);
    let mask_prob = param(cfg, "mask_prob", 0.15)?;
    let inject = knowledge && param(cfg, "inject", true)?;
    let longtail = if inject {
        let stats = entity_frequencies(&corpus, names.iter().map(String::as_str), &vocab);
        let policy = LongTailPolicy {
            tail_quantile: param(cfg, "tail_quantile", LongTailPolicy::default().tail_quantile)?,
            min_triples: param(cfg, "min_triples", LongTailPolicy::default().min_triples)?,
        };
        select_longtail_entities(&stats, &kb, policy).context("long-tail selection")?
    } else {
        BTreeSet::new()
    };
    let pcfg = PretrainConfig {
        epochs: cfg.epoch_num,
        batch_size: cfg.batch_size,
        learning_rate: cfg.learning_rate,
        mask_prob,
        lambda_rel: param(cfg, "lambda_rel", PretrainConfig::default().lambda_rel)?,
        seed: cfg.seed,
        inject,
    };
    let trainer = Pretrainer::new(&model, &corpus, &kb, &longtail, &vocab, &pcfg).context("pre-training")?;
    let probes = probes_from(cfg)?;
    let mut extras = BTreeMap::new();
    if knowledge {
        extras.insert("num_longtail_entities".into(), longtail.len() as f64);
    }
    if let Some(p) = &probes {
        extras.insert("probe_majority_baseline".into(), majority_baseline(p).context("probes")?);
    }
    let mut job = LmJob {
        cfg,
        state: app_state(cfg, app, None),
        model,
        vocab: &vocab,
        trainer,
        dev: dev_seqs,
        mask_prob,
        probes,
        extras,
    };
    drive(&mut job, cfg, app)
}

pub(super) fn evaluate(
    cfg: &CliConfig,
    state: &AppState,
    _schema: &DatasetSchema,
    records: &[Record],
) -> Result<BTreeMap<String, f64>, CliError> {
    let (model, vocab) = load_checkpoint(&cfg.checkpoint_dir).context("--checkpoint_dir")?;
    let (first, second, _) = input_columns(cfg, state);
    let cols: Vec<&str> = std::iter::once(first.as_str()).chain(second.as_deref()).collect();
    let texts = record_texts(records, &cols);
    let len = cfg.sequence_length.min(model.config().max_position);
    let seqs = encode_texts(&vocab, &texts, len, None);
    let (c, t) = masked_token_accuracy(&model, &seqs, param(cfg, "mask_prob", 0.15)?, cfg.seed, cfg.batch_size)
        .context("evaluation")?;
    let mut m = BTreeMap::new();
    m.insert("masked_token_accuracy".into(), if t == 0 { 0.0 } else { c as f64 / t as f64 });
    m.insert("masked_tokens".into(), t as f64);
    if let Some(p) = probes_from(cfg)? {
        m.insert("probe_p_at_1".into(), knowledge_probe(&model, &vocab, &p).context("probes")?.p_at_1());
    }
    Ok(m)
}
