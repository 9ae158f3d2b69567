//! Desk-scale laboratory for sequence layers whose hidden state is a small
//! trainable model, next to their linear-complexity baselines.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`] / [`graph`] / [`ops`]: dense tensors and an eager autodiff
//!   tape whose backward pass emits graph nodes, giving exact higher-order
//!   derivatives.
//! - [`ttt`]: the test-time-training sequence layer — inner-loop gradient
//!   updates of a per-sequence hidden model, mini-batched scans, bidirection,
//!   gating, and the modified sequence-modeling block.
//! - [`baselines`]: masked softmax attention, matrix-state linear attention,
//!   and a gated delta-rule layer.
//! - [`shard`]: tensor-parallel execution of the MLP hidden state across
//!   worker threads with a single inner-loss all-reduce per mini-batch.
//! - [`pipeline`]: storyboard parsing and interleaved text/video sequence
//!   assembly with segment-local attention masks.
//! - [`model`] / [`tasks`] / [`train`]: toy models, synthetic tasks, and the
//!   outer-loop optimizer with parameter groups and stage schedules.
//! - [`bench`] / [`report`] / [`verify`]: wall-clock scaling benchmarks,
//!   CSV/manifest emission, and runnable verification suites.

pub mod baselines;
pub mod bench;
pub mod check;
pub mod element;
pub mod error;
pub mod graph;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod report;
pub mod shard;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod ttt;
pub mod verify;

pub use element::Element;
pub use error::{Error, Result};
pub use graph::{Graph, OpKind, Var};
pub use tensor::Tensor;

use rand_chacha::rand_core::SeedableRng;

/// The deterministic RNG used everywhere a seed appears in a config.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
