//! Continual learning of sentiment-classification tasks with a frozen
//! transformer backbone, per-layer adapters, task masks, and contrastive
//! objectives for distillation and knowledge sharing.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`kernels`], [`tape`]: dense f64 math with reverse-mode
//!   differentiation, verified by [`gradcheck`].
//! - [`data`]: JSONL ingestion, synthetic multi-domain task suites, hashed
//!   tokenization, batching.
//! - [`model`], [`masks`], [`attention`]: the adapter transformer, task
//!   masks with gradient protection, and task-based self-attention.
//! - [`losses`], [`optim`]: the training objectives and Adam.
//! - [`harness`], [`metrics`]: sequential task training, domain- and
//!   task-incremental evaluation, ablations.
//! - [`config`], [`checkpoint`], [`cli`]: the user-facing surface.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod kernels;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
