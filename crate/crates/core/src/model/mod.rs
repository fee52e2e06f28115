//! Multimodal MLP, multimodal transformer, hierarchical transformer and
//! IsoNet, with training and evaluation.
//!
//! Transformer inputs are per-stream tensors `[N, C, T]`. Token sequences are
//! `[N, tokens, E]` with a CLS token in front; every token carries a [`Tag`].
//! Attention layers are numbered from 1 across the whole model: per-stream
//! encoders share numbers `1..=L`, the hierarchical second stage continues at
//! `L + 1`.

mod arch;
mod checkpoint;
mod config;
mod layers;
mod params;
mod train;

pub use arch::{Forward, Model};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{Family, InputSpec, ModelConfig, StreamShape, TokenMode};
pub use layers::{
    check_tags, run_stack, sinusoidal_encoding, AttentionHook, AttentionTrace, EncoderLayer, LayerNorm, Linear, Pass,
    Tag, TokenSequence,
};
pub use params::{Bound, ParamId, ParamStore};
pub use train::{
    accuracy_by_subject, anneal_lambda, annealed_loss, evaluate, history_jsonl, predict, predict_logits, train,
    zero_modality_eval, Batch, EpochRecord, EvalResult, SubjectAccuracy, HISTORY_SCHEMA_VERSION,
};
