//! Checkpoint directory layout and the `model.bin` format.
//!
//! ```text
//! <dir>/config.json        canonical JSON of ModelConfig
//! <dir>/model.bin          see below
//! <dir>/vocab.txt          one token per line
//! <dir>/label_map.json     optional, written by the application layer
//! <dir>/eval_report.json   optional, written by the application layer
//! ```
//!
//! `model.bin`, all integers u32 little-endian:
//!
//! ```text
//! "ENLP1"
//! config_len, config JSON bytes (canonical)
//! param_count
//! repeated, sorted by name:
//!     name_len, name bytes (UTF-8), rank, dims[rank], f32 LE values[product(dims)]
//! ```
//!
//! Parameters are stored at 32-bit precision; training runs in 64-bit, so a
//! save rounds each value to the nearest f32. Loading widens exactly, which
//! makes `load → save` byte-identical.

use std::fs;
use std::path::Path;

use crate::autograd::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model_zoo::{ModelConfig, TransformerModel};
use crate::tokenization::Vocabulary;

pub const MAGIC: &[u8; 5] = b"ENLP1";
pub const CONFIG_FILE: &str = "config.json";
pub const MODEL_FILE: &str = "model.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const LABEL_MAP_FILE: &str = "label_map.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";

/// Writes `bytes` to `path` through a temporary sibling and a rename, so a
/// crash never leaves a partially written file under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Domain(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Serializes parameters (sorted by name) with their config.
pub fn encode_params(config: &ModelConfig, params: &ParamStore) -> Vec<u8> {
    let cfg = config.to_canonical_json();
    let mut out = Vec::with_capacity(16 + cfg.len() + params.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(cfg.as_bytes());
    let mut entries: Vec<(&str, &Tensor)> = params.iter().collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    put_u32(&mut out, entries.len());
    for (name, t) in entries {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn encode_model(model: &TransformerModel) -> Vec<u8> {
    encode_params(model.config(), model.params())
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format(format!(
                "model.bin truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses `model.bin` into a config and a parameter store (insertion order
/// follows the file, i.e. sorted by name).
pub fn decode_params(bytes: &[u8]) -> Result<(ModelConfig, ParamStore)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Format("bad magic; expected ENLP1".into()));
    }
    let cfg_len = r.u32()?;
    let cfg_bytes = r.take(cfg_len)?;
    let config: ModelConfig = serde_json::from_slice(cfg_bytes)
        .map_err(|e| Error::Format(format!("embedded config is not valid JSON: {e}")))?;
    let count = r.u32()?;
    let mut store = ParamStore::new();
    let mut prev: Option<String> = None;
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        if prev.as_deref().is_some_and(|p| p >= name.as_str()) {
            return Err(Error::Format(format!("parameter names not sorted/unique at {name:?}")));
        }
        let rank = r.u32()?;
        if rank > 8 {
            return Err(Error::Format(format!("implausible rank {rank} for {name:?}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| r.u32()).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("parameter {name:?}: {e}")))?;
        store.insert(name.clone(), t)?;
        prev = Some(name);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after parameters", bytes.len() - r.pos)));
    }
    Ok((config, store))
}

pub fn decode_model(bytes: &[u8]) -> Result<TransformerModel> {
    let (config, store) = decode_params(bytes)?;
    TransformerModel::from_params(config, store)
}

/// Writes `config.json`, `model.bin` and `vocab.txt` into `dir`.
pub fn save_checkpoint(model: &TransformerModel, vocab: &Vocabulary, dir: &Path) -> Result<()> {
    if vocab.len() != model.config().vocab_size {
        return Err(Error::Validation(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.config().vocab_size
        )));
    }
    fs::create_dir_all(dir)?;
    let cfg = serde_json::to_string_pretty(&serde_json::to_value(model.config())?)?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.as_bytes())?;
    write_atomic(&dir.join(MODEL_FILE), &encode_model(model))?;
    let mut vocab_text = vocab.tokens().join("\n");
    vocab_text.push('\n');
    write_atomic(&dir.join(VOCAB_FILE), vocab_text.as_bytes())?;
    Ok(())
}

/// Loads and cross-validates a checkpoint directory.
pub fn load_checkpoint(dir: &Path) -> Result<(TransformerModel, Vocabulary)> {
    let bytes = fs::read(dir.join(MODEL_FILE))?;
    let model = decode_model(&bytes)?;
    let cfg_text = fs::read_to_string(dir.join(CONFIG_FILE))?;
    let cfg: ModelConfig = serde_json::from_str(&cfg_text)
        .map_err(|e| Error::Format(format!("config.json: {e}")))?;
    if &cfg != model.config() {
        return Err(Error::Validation("config.json disagrees with the config embedded in model.bin".into()));
    }
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != cfg.vocab_size {
        return Err(Error::Validation(format!(
            "vocab.txt has {} tokens but the model expects {}",
            vocab.len(),
            cfg.vocab_size
        )));
    }
    Ok((model, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenization::build_vocab;

    fn tiny() -> (TransformerModel, Vocabulary) {
        let vocab = build_vocab(&["the cat sat on the mat"], 1).unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.len(),
            hidden_dim: 8,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 16,
            max_position: 16,
            num_classes: 3,
            num_relations: 2,
            dropout_prob: 0.0,
        };
        (TransformerModel::init(&cfg, 1).unwrap(), vocab)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (m, v) = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, &v, dir.path()).unwrap();
        let first = fs::read(dir.path().join(MODEL_FILE)).unwrap();
        let (loaded, lv) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(lv, v);
        let dir2 = tempfile::tempdir().unwrap();
        save_checkpoint(&loaded, &lv, dir2.path()).unwrap();
        let second = fs::read(dir2.path().join(MODEL_FILE)).unwrap();
        assert_eq!(first, second);
        for (name, t) in loaded.params().iter() {
            let orig = m.params().by_name(name).unwrap();
            for (a, b) in t.data().iter().zip(orig.data()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let (m, _) = tiny();
        let bytes = encode_model(&m);
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode_model(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn missing_parameter_is_named() {
        let (m, _) = tiny();
        let mut store = ParamStore::new();
        for (name, t) in m.params().iter().filter(|(n, _)| *n != "pooler.bias") {
            store.insert(name, t.clone()).unwrap();
        }
        let bytes = encode_params(m.config(), &store);
        let err = decode_model(&bytes).unwrap_err().to_string();
        assert!(err.contains("pooler.bias"), "{err}");
    }

    #[test]
    fn extra_parameter_is_named() {
        let (m, _) = tiny();
        let mut store = m.params().clone();
        store.insert("zzz.extra", Tensor::zeros(&[1])).unwrap();
        let err = decode_model(&encode_params(m.config(), &store)).unwrap_err().to_string();
        assert!(err.contains("zzz.extra"), "{err}");
    }

    #[test]
    fn mismatched_vocab_rejected() {
        let (m, v) = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, &v, dir.path()).unwrap();
        let other = build_vocab(&["a b c"], 1).unwrap();
        other.save(&dir.path().join(VOCAB_FILE)).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Validation(_))));
    }

    #[test]
    fn no_temp_files_left_behind() {
        let (m, v) = tiny();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, &v, dir.path()).unwrap();
        let names: Vec<String> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert!(names.iter().all(|n| !n.ends_with(".tmp")), "{names:?}");
    }
}
