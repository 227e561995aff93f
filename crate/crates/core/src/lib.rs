//! Desk-scale encoder lifecycle: corpus engineering, unigram tokenization,
//! pre-layernorm masked-language-model pretraining, continued in-domain
//! pretraining, teacher-assistant distillation, intent/slot fine-tuning and
//! evaluation.
//!
//! Batch work (per-sequence forward/backward, evaluation sweeps) runs on the
//! rayon pool when the `parallel` feature is on; reductions are ordered so
//! results are bitwise identical to sequential execution.

pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod finetune;
pub mod io;
pub mod par;
pub mod pipeline;
pub mod pretrain;
pub mod rng;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
