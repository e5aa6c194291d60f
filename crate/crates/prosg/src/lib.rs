//! Desk-scale recurrent language model with prompt-conditioned low-rank
//! weight deltas.
//!
//! After a prompt has been read, a gradient-synthesis module turns the
//! per-layer hidden states at the prompt's final token into factored
//! low-rank deltas for the four time-mixing matrices. The deltas stay
//! active for the rest of the generation, which keeps prompt content
//! available to the model without growing its state.
//!
//! Crate layout:
//! - [`tensor`], [`graph`], [`gradcheck`]: dense tensors, reverse-mode
//!   differentiation, and the finite-difference oracle.
//! - [`model`]: the recurrent backbone (token embedding, time-mixing
//!   with the WKV recurrence, channel-mixing, streaming inference).
//! - [`synth`]: the delta-synthesis module and its factored outputs.
//! - [`train`]: two-phase training (backbone fine-tune, then frozen
//!   backbone + synthesis training) with padded batching.
//! - [`taskgen`]: synthetic multi-stage-instruction tasks with
//!   machine-checkable compliance, byte tokenizer, dataset I/O.
//! - [`eval`]: perplexity and compliance accuracy reports.
//! - [`checkpoint`], [`runconfig`]: on-disk formats.

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod math;
pub mod model;
pub mod runconfig;
pub mod scalar;
pub mod selftest;
pub mod synth;
pub mod taskgen;
pub mod tensor;
pub mod train;

/// Variance guard added inside every layer norm.
pub const LAYERNORM_EPS: f64 = 1e-5;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{NamedParams, Param, Tensor};
