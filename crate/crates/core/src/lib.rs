//! Report-to-diagnosis pipeline on a small decoder-only transformer:
//! corpus preparation, word-level tokenization, a LLaMA-style model with
//! hand-written gradients, low-rank adapters, int4 weights, sampling and
//! ROUGE evaluation.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod lora;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod quant;
pub mod rouge;
pub mod sample;
pub mod tokenizer;
pub mod train;

pub use error::{Error, ErrorKind, Result};
