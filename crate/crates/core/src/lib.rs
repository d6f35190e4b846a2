//! Knowledge tracing with a prompt-aligned miniature language model.
//!
//! The crate provides the full pipeline: dataset loading and synthesis,
//! sequence-encoder pretraining, prompt construction with embedding
//! injection, low-rank fine-tuning of a small decoder-only model, and the
//! evaluation/ablation harness used by the command line tool.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod harness;
pub mod lm;
pub mod metrics;
pub mod optim;
pub mod context;
pub mod fusion;
pub mod prompt;
pub mod seqkt;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
