//! Sparse memory finetuning at desk scale.
//!
//! A tiny decoder-only transformer in which one feed-forward block is replaced
//! by a product-key memory layer, plus the machinery to finetune it by updating
//! only a handful of TF-IDF-ranked memory value rows per batch, and a
//! continual-learning harness that measures what was learned against what was
//! forgotten — with full finetuning, LoRA, and naive memory updates as
//! baselines. Everything runs on CPU from scratch: the autodiff tape, the
//! optimizers, the data, and the evaluation loop.
//!
//! Crate layout mirrors the pipeline:
//!
//! * [`numerics`] — tensors, the reverse-mode tape, finite-difference checks;
//! * [`memory`] — the product-key memory layer and access recording;
//! * [`ranking`] — TF-IDF scoring of accessed memory slots, trainable-set selection;
//! * [`model`] — the transformer, its config, forward/loss/decode;
//! * [`training`] — SGD/AdamW, LoRA adapters, and the per-method update steps;
//! * [`harness`] — synthetic facts, pretraining, the continual stream,
//!   evaluation, checkpoints, metrics files.
//!
//! The `memft` binary exposes the whole pipeline as subcommands
//! (`pretrain`, `stream`, `sweep`, `ablate`, `coreset`, `report`).

pub mod error;
pub mod harness;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod ranking;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
