//! A desk-scale language model that learns to *think selectively*: instead of
//! emitting every chain-of-thought token, it compresses spans of predictable
//! reasoning into single latent steps and only spells out the tokens a
//! reliability gate judges risky to skip.
//!
//! The pieces, bottom up:
//!
//! - [`num`]: a dense-tensor reverse-mode autodiff engine, Adam, finite
//!   difference gradient checking, and a manifest+blob checkpoint format.
//! - [`model`]: the transformer backbone, the span compressor, the look-ahead
//!   feature decoder, and the scalar confidence gate.
//! - [`hybrid`]: hybrid token/latent sequences and their causal alignment
//!   targets, plus the span-selection heuristics and coverage schedule.
//! - [`data`]: the synthetic arithmetic-chain task, whitespace tokenizer, and
//!   JSONL dataset handling.
//! - [`train`]: the staged pipeline (baseline SFT, latent compression
//!   learning, decoder+gate supervision with verification refinement, and
//!   trajectory-level group-relative policy optimization).
//! - [`infer`]: the selective decoding loop, evaluation, threshold sweeps,
//!   and timing runs.
//! - [`report`]: CSV/JSONL/SVG output writers and small metric utilities.
//!
//! Everything numeric is generic over [`num::Scalar`]; training instantiates
//! `f32` and gradient checks instantiate `f64`.

pub mod config;
pub mod data;
pub mod hybrid;
pub mod infer;
pub mod model;
pub mod num;
pub mod report;
pub mod train;

/// Training-time scalar.
pub type Train = f32;
/// Gradient-check scalar.
pub type Check = f64;

/// Tensor instantiated at the training scalar.
pub type Tensor32 = num::Tensor<Train>;
/// Tensor instantiated at the gradient-check scalar.
pub type Tensor64 = num::Tensor<Check>;
/// Parameter store instantiated at the training scalar.
pub type Params32 = num::ParamStore<Train>;
/// Graph instantiated at the training scalar.
pub type Graph32<'a> = num::Graph<'a, Train>;
