use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformer encoder hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_position: usize,
    pub num_classes: usize,
    /// Size of the relation vocabulary decoded by the relation head; 0 drops the head.
    #[serde(default)]
    pub num_relations: usize,
    pub dropout_prob: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_position", self.max_position),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(Error::Config(format!("dropout_prob {} outside [0, 1)", self.dropout_prob)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Closed-form parameter count:
    ///
    /// ```text
    ///   V·d + P·d                                  token + position embeddings
    /// + L·(4d + 4(d² + d) + 2·d·f + f + d)         per layer: 2 norms, Q/K/V/O, FFN
    /// + 2d                                         final norm
    /// + V                                          MLM bias (projection tied to embeddings)
    /// + d² + d                                     pooler
    /// + d·K + K                                    classifier
    /// + [R > 0]·(d·R + R)                          relation head
    /// ```
    pub fn param_count(&self) -> usize {
        let (v, d, l, f, p, k, r) = (
            self.vocab_size,
            self.hidden_dim,
            self.num_layers,
            self.ffn_dim,
            self.max_position,
            self.num_classes,
            self.num_relations,
        );
        let per_layer = 4 * d + 4 * (d * d + d) + 2 * d * f + f + d;
        let relation = if r > 0 { d * r + r } else { 0 };
        v * d + p * d + l * per_layer + 2 * d + v + d * d + d + d * k + k + relation
    }

    /// Canonical JSON (sorted keys, no whitespace).
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&value).expect("value serializes")
    }
}

/// Named architectures in the zoo. Vocabulary, class and relation counts are
/// filled in from the data at training time.
pub const ZOO_NAMES: [&str; 3] = ["bert-base-uncased", "bert-small-uncased", "bert-tiny-uncased"];

pub fn zoo_config(name: &str) -> Option<ModelConfig> {
    let (hidden_dim, num_layers, num_heads, ffn_dim) = match name {
        "bert-tiny-uncased" => (16, 2, 2, 32),
        "bert-small-uncased" => (32, 2, 2, 64),
        "bert-base-uncased" => (64, 4, 4, 128),
        _ => return None,
    };
    Some(ModelConfig {
        vocab_size: 0,
        hidden_dim,
        num_layers,
        num_heads,
        ffn_dim,
        max_position: 128,
        num_classes: 2,
        num_relations: 0,
        dropout_prob: 0.1,
    })
}
