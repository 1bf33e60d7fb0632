//! Core of a prompt-based continued pre-training laboratory.
//!
//! Everything here is `no_std` + `alloc`: tensors and reverse-mode autodiff,
//! the AdamW optimizer, a word-level tokenizer, a small transformer encoder,
//! prompt templates and verbalizers, training objectives, the training and
//! corpus-building stages, and the evaluation metrics used by the harness.
//! File formats, the CLI and experiment orchestration live in the `pcp` crate.

#![no_std]

extern crate alloc;

pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod tape;
pub mod template;
pub mod tensor;
pub mod tokenizer;

pub use error::{Error, Result};
pub use model::{Batch, Graph, Mode, ModelConfig, ModelParameters};
pub use optim::{AdamW, AdamWConfig, Schedule};
pub use tape::{Tape, Var};
pub use tensor::{Real, Tensor};
pub use tokenizer::{Encoding, Vocabulary};
