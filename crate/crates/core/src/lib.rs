//! Cross-image contrastive decoding for vision-language model backends.

pub mod cli;
pub mod engine;
pub mod exec;
pub mod experiment;
pub mod logits;
pub mod metrics;
pub mod protocol;
pub mod selector;
pub mod serde_ext;
pub mod sim;
