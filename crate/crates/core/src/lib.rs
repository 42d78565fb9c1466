//! Deterministic numeric core for progressively grown decoder-only
//! transformers.
//!
//! The crate is `no_std` (with `alloc`) and routes every transcendental
//! function through [`libm`], so a given build produces bit-identical
//! results on every platform. Everything observable — weight init, forward
//! passes, gradients, growth operators, schedules — is a pure function of
//! its explicit inputs plus a seeded [`rng::Rng`] where declared.
//!
//! Module map:
//! - [`tensor`], [`tape`], [`rng`]: dense tensors, reverse-mode autodiff,
//!   seeded randomness.
//! - [`model`]: the GPT-style decoder architecture, parameter counting and
//!   the language-model loss.
//! - [`growth`]: function-preserving width/depth growth with the scalar
//!   mask mechanism and distance-based layer selection.
//! - [`schedule`], [`optim`], [`train`]: dual vector/matrix learning
//!   rates, Adam with decoupled weight decay, and the single training step.
//! - [`tokenizer`], [`curation`]: byte-level tokenization and
//!   perplexity-based sample filtering.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod curation;
pub mod error;
pub mod growth;
pub mod model;
pub mod optim;
pub mod real;
pub mod rng;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use checkpoint::Checkpoint;
pub use error::CoreError;
pub use real::Real;
pub use rng::Rng;
pub use tensor::Tensor;
