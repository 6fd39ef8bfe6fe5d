//! Allocation-only core of a desk-scale pre-training toolkit for compact
//! Llama-style decoders.
//!
//! Everything in this crate is pure computation over in-memory values: no
//! files, clocks or threads. The companion `ttl` crate owns IO, file formats
//! and the command line.
//!
//! - [`planner`]: scaling-law loss surface, token budgets, epoch repetition.
//! - [`tokenizer`]: byte-fallback BPE training, encoding and fertility reports.
//! - [`tensor`]: dense tensors with a reverse-mode autodiff tape.
//! - [`model`]: the decoder (RMSNorm, RoPE, grouped-query attention, SwiGLU).
//! - [`data`]: corpus tokenization, fixed-length packing, eval splits.
//! - [`train`]: AdamW, warmup-cosine schedule, accumulation, resumable state.
//! - [`inference`]: KV-cached generation and 4-bit group quantization.
//! - [`telemetry`]: energy, emissions and per-checkpoint cost reports.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod data;
pub mod error;
pub mod inference;
pub mod model;
pub mod planner;
pub mod telemetry;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
