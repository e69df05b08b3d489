//! Desk-scale NLP model development toolkit.
//!
//! The crate is organised the way the application layer consumes it:
//!
//! * [`autograd`] – tensors, reverse-mode differentiation, Adam.
//! * [`tokenization`] – vocabulary, encoding, MLM masking, padding.
//! * [`model_zoo`] – transformer encoder, task heads, checkpoints, named configs.
//! * [`data_hub`] – schemas, TSV/JSONL readers, toy dataset registry, triple store.
//! * [`dkplm`] – knowledge-enhanced pre-training and cloze probing.
//! * [`fewshot`] – PET, P-Tuning and contrastive prompt tuning.
//! * [`distill`] – teacher caches, temperature KD, MetaKD.
//! * [`train`] – shared training loops used by the application layer.

pub mod autograd;
pub mod data_hub;
pub mod distill;
pub mod dkplm;
pub mod error;
pub mod fewshot;
pub mod metrics;
pub mod model_zoo;
pub mod rng;
#[cfg(any(test, feature = "testkit"))]
pub mod testkit;
pub mod tokenization;
pub mod train;

pub use autograd::{adam_step, AdamConfig, AdamState, ParamId, ParamStore, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use rng::Rng;
