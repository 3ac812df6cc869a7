//! Population transformer: self-supervised aggregation of per-channel
//! temporal embeddings over arbitrary electrode ensembles.
//!
//! The crate is organised bottom-up:
//!
//! - [`engine`]: tensors, reverse-mode gradients, LAMB/AdamW, schedules
//! - [`data`]: electrode layouts, the embedding store format, splits and a
//!   synthetic generator with planted block structure
//! - [`encoding`]: sinusoidal coordinate encodings and token assembly
//! - [`model`]: the transformer encoder with CLS and per-token heads, and
//!   checkpoint persistence
//! - [`pretrain`]: ensemble-pair sampling, channel swaps, losses, training
//! - [`decode`]: fine-tuning, frozen probes, aggregation baselines, metrics
//!   and sweep harnesses
//! - [`interpret`]: channel-omission influence and attention rollout

pub mod engine;
pub mod data;
pub mod encoding;
pub mod model;
pub mod pretrain;
pub mod decode;
pub mod interpret;
