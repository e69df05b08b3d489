//! The `--key=value` flag grammar.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use log::warn;

use crate::error::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Evaluate,
    Predict,
}

impl FromStr for RunMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(RunMode::Train),
            "evaluate" => Ok(RunMode::Evaluate),
            "predict" => Ok(RunMode::Predict),
            _ => Err(format!("unknown mode {s:?} (train, evaluate, predict)")),
        }
    }
}

/// What a registered application trains and how it is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AppKind {
    Classifier,
    LanguageModel,
    Knowledge,
    FewShot,
    Distill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AppName {
    TextClassify,
    TextMatch,
    LanguageModeling,
    DkplmPretrain,
    FewshotPet,
    FewshotPtuning,
    FewshotCp,
    DistillKd,
    DistillMetakd,
}

/// The static application registry.
pub const APPS: [(AppName, &str, AppKind); 9] = [
    (AppName::TextClassify, "text_classify", AppKind::Classifier),
    (AppName::TextMatch, "text_match", AppKind::Classifier),
    (AppName::LanguageModeling, "language_modeling", AppKind::LanguageModel),
    (AppName::DkplmPretrain, "dkplm_pretrain", AppKind::Knowledge),
    (AppName::FewshotPet, "fewshot_pet", AppKind::FewShot),
    (AppName::FewshotPtuning, "fewshot_ptuning", AppKind::FewShot),
    (AppName::FewshotCp, "fewshot_cp", AppKind::FewShot),
    (AppName::DistillKd, "distill_kd", AppKind::Distill),
    (AppName::DistillMetakd, "distill_metakd", AppKind::Distill),
];

impl AppName {
    pub fn as_str(self) -> &'static str {
        APPS.iter().find(|(a, _, _)| *a == self).expect("registered").1
    }

    pub fn kind(self) -> AppKind {
        APPS.iter().find(|(a, _, _)| *a == self).expect("registered").2
    }

    /// Whether records carry a label column mapped through
    /// `label_enumerate_values`.
    pub fn needs_labels(self) -> bool {
        !matches!(self.kind(), AppKind::LanguageModel | AppKind::Knowledge)
    }
}

impl FromStr for AppName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        APPS.iter().find(|(_, n, _)| *n == s).map(|(a, _, _)| *a).ok_or_else(|| {
            let names: Vec<&str> = APPS.iter().map(|(_, n, _)| *n).collect();
            format!("unknown app {s:?} (available: {})", names.join(", "))
        })
    }
}

impl fmt::Display for AppName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_EPOCHS: usize = 3;
pub const DEFAULT_SEQUENCE_LENGTH: usize = 128;
pub const DEFAULT_LEARNING_RATE: f64 = 3e-5;
pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const DEFAULT_SEED: u64 = 42;
const BATCH_GRID: [usize; 4] = [8, 16, 32, 48];

/// A parsed command line.
#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub mode: RunMode,
    /// Accepted for compatibility; training always runs on the CPU.
    pub worker_gpu: Option<String>,
    pub tables: Vec<PathBuf>,
    /// Predict output file (evaluate: optional metrics file).
    pub outputs: Option<PathBuf>,
    pub input_schema: Option<String>,
    pub first_sequence: Option<String>,
    pub second_sequence: Option<String>,
    pub label_name: Option<String>,
    pub label_enumerate_values: Option<Vec<String>>,
    pub checkpoint_dir: PathBuf,
    pub epoch_num: usize,
    pub sequence_length: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Required for training; evaluate and predict fall back to the app
    /// recorded in the checkpoint.
    pub app_name: Option<AppName>,
    pub user_defined_parameters: BTreeMap<String, String>,
}

impl CliConfig {
    pub fn user_param(&self, key: &str) -> Option<&str> {
        self.user_defined_parameters.get(key).map(String::as_str)
    }
}

const FLAGS: [&str; 17] = [
    "mode",
    "worker_gpu",
    "tables",
    "outputs",
    "input_schema",
    "first_sequence",
    "second_sequence",
    "label_name",
    "label_enumerate_values",
    "checkpoint_dir",
    "epoch_num",
    "sequence_length",
    "learning_rate",
    "batch_size",
    "seed",
    "app_name",
    "user_defined_parameters",
];

fn usage(flag: &str, message: impl Into<String>) -> UsageError {
    UsageError {
        flag: flag.to_string(),
        message: message.into(),
    }
}

fn parse_num<T: FromStr>(flag: &str, raw: &str) -> Result<T, UsageError> {
    raw.trim().parse().map_err(|_| usage(flag, format!("malformed value {raw:?}")))
}

/// Splits `key=value` pairs separated by whitespace. Surrounding quotes on
/// the whole list are dropped.
pub fn parse_user_parameters(raw: &str) -> Result<BTreeMap<String, String>, UsageError> {
    let flag = "user_defined_parameters";
    let mut text = raw.trim();
    for q in ['\'', '"'] {
        if text.len() >= 2 && text.starts_with(q) && text.ends_with(q) {
            text = &text[1..text.len() - 1];
        }
    }
    let mut out = BTreeMap::new();
    for item in text.split_whitespace() {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| usage(flag, format!("{item:?} is not key=value")))?;
        if k.is_empty() {
            return Err(usage(flag, format!("{item:?} has an empty key")));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(usage(flag, format!("parameter {k:?} given twice")));
        }
    }
    Ok(out)
}

/// Parses the arguments after the program name.
///
/// Flags are `--key=value`. A flag written with an empty value (`--key=`)
/// takes the next argument as its value when that argument is not itself a
/// flag, which is how a value continued on the following line arrives.
pub fn parse_cli<I, S>(argv: I) -> Result<CliConfig, UsageError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let args: Vec<String> = argv.into_iter().map(|s| s.as_ref().to_string()).collect();
    let mut raw: BTreeMap<&'static str, String> = BTreeMap::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let body = arg
            .strip_prefix("--")
            .ok_or_else(|| usage(arg, "expected a --key=value flag"))?;
        let (key, mut value) = match body.split_once('=') {
            Some((k, v)) => (k, v.to_string()),
            None => return Err(usage(body, "flag needs a value (--key=value)")),
        };
        let key = *FLAGS
            .iter()
            .find(|f| **f == key)
            .ok_or_else(|| usage(key, "unknown flag"))?;
        if value.is_empty() && i + 1 < args.len() && !args[i + 1].starts_with("--") {
            i += 1;
            value = args[i].clone();
        }
        if raw.insert(key, value).is_some() {
            return Err(usage(key, "flag given twice"));
        }
        i += 1;
    }
    let take = |k: &str| raw.get(k).map(|s| s.trim().to_string()).filter(|s| !s.is_empty());

    let mode: RunMode = take("mode")
        .ok_or_else(|| usage("mode", "required"))?
        .parse()
        .map_err(|e: String| usage("mode", e))?;
    let worker_gpu = take("worker_gpu");
    if let Some(g) = &worker_gpu {
        warn!("--worker_gpu={g} ignored: training runs on the CPU");
    }
    let tables: Vec<PathBuf> = take("tables")
        .map(|t| t.split(',').map(|p| PathBuf::from(p.trim())).collect())
        .unwrap_or_default();
    if tables.iter().any(|p| p.as_os_str().is_empty()) {
        return Err(usage("tables", "empty path in list"));
    }
    match (mode, tables.len()) {
        (_, 0) => return Err(usage("tables", "required")),
        (RunMode::Train, n) if n != 2 => return Err(usage("tables", format!("train needs train,dev tables; got {n}"))),
        (RunMode::Evaluate | RunMode::Predict, n) if n > 1 => {
            return Err(usage("tables", format!("{mode:?} reads one table; got {n}").to_lowercase()))
        }
        _ => {}
    }
    let label_enumerate_values = match take("label_enumerate_values") {
        Some(list) => {
            let values: Vec<String> = list.split(',').map(|v| v.trim().to_string()).collect();
            let mut seen = std::collections::HashSet::new();
            for v in &values {
                if v.is_empty() {
                    return Err(usage("label_enumerate_values", "empty label"));
                }
                if !seen.insert(v) {
                    return Err(usage("label_enumerate_values", format!("label {v:?} listed twice")));
                }
            }
            Some(values)
        }
        None => None,
    };
    let app_name = match take("app_name") {
        Some(a) => Some(a.parse().map_err(|e: String| usage("app_name", e))?),
        None => None,
    };
    let epoch_num = match take("epoch_num") {
        Some(v) => parse_num("epoch_num", &v)?,
        None => DEFAULT_EPOCHS,
    };
    let sequence_length = match take("sequence_length") {
        Some(v) => parse_num("sequence_length", &v)?,
        None => DEFAULT_SEQUENCE_LENGTH,
    };
    if sequence_length < 4 {
        return Err(usage("sequence_length", "must be at least 4"));
    }
    let learning_rate: f64 = match take("learning_rate") {
        Some(v) => parse_num("learning_rate", &v)?,
        None => DEFAULT_LEARNING_RATE,
    };
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(usage("learning_rate", "must be a positive number"));
    }
    let batch_size = match take("batch_size") {
        Some(v) => parse_num("batch_size", &v)?,
        None => DEFAULT_BATCH_SIZE,
    };
    if batch_size == 0 {
        return Err(usage("batch_size", "must be positive"));
    }
    if !BATCH_GRID.contains(&batch_size) {
        warn!("--batch_size={batch_size} is outside the usual grid {BATCH_GRID:?}");
    }
    let seed = match take("seed") {
        Some(v) => parse_num("seed", &v)?,
        None => DEFAULT_SEED,
    };
    let user_defined_parameters = match raw.get("user_defined_parameters") {
        Some(v) => parse_user_parameters(v)?,
        None => BTreeMap::new(),
    };
    let checkpoint_dir = PathBuf::from(take("checkpoint_dir").ok_or_else(|| usage("checkpoint_dir", "required"))?);

    let cfg = CliConfig {
        mode,
        worker_gpu,
        tables,
        outputs: take("outputs").map(PathBuf::from),
        input_schema: take("input_schema"),
        first_sequence: take("first_sequence"),
        second_sequence: take("second_sequence"),
        label_name: take("label_name"),
        label_enumerate_values,
        checkpoint_dir,
        epoch_num,
        sequence_length,
        learning_rate,
        batch_size,
        seed,
        app_name,
        user_defined_parameters,
    };
    match mode {
        RunMode::Train => {
            let app = cfg.app_name.ok_or_else(|| usage("app_name", "required for training"))?;
            if cfg.epoch_num == 0 {
                return Err(usage("epoch_num", "nothing to train with 0 epochs"));
            }
            for (flag, present) in [("input_schema", cfg.input_schema.is_some()), ("first_sequence", cfg.first_sequence.is_some())] {
                if !present {
                    return Err(usage(flag, "required for training"));
                }
            }
            if app.needs_labels() {
                if cfg.label_name.is_none() {
                    return Err(usage("label_name", format!("required by {app}")));
                }
                if cfg.label_enumerate_values.is_none() {
                    return Err(usage("label_enumerate_values", format!("required by {app}")));
                }
            }
            if app == AppName::TextMatch && cfg.second_sequence.is_none() {
                return Err(usage("second_sequence", "required by text_match"));
            }
        }
        RunMode::Evaluate => {}
        RunMode::Predict => {
            if cfg.outputs.is_none() {
                return Err(usage("outputs", "required for predict"));
            }
        }
    }
    Ok(cfg)
}
