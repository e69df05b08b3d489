//! Transformer encoder, task heads, named configurations and checkpoints.

mod checkpoint;
mod config;
mod model;

pub use checkpoint::{
    decode_model, decode_params, encode_model, encode_params, load_checkpoint, save_checkpoint, write_atomic,
    CONFIG_FILE, EVAL_REPORT_FILE, LABEL_MAP_FILE, MAGIC, MODEL_FILE, VOCAB_FILE,
};
pub use config::{zoo_config, ModelConfig, ZOO_NAMES};
pub use model::{
    non_pad_positions, parameter_layout, EmbeddingOverride, Encoded, EncoderInput, Mode, TransformerModel,
    LAYER_NORM_EPS,
};
