//! Mixture-of-experts composition of low-rank adapters.
//!
//! A `MoeLoraLayer` wraps a frozen base weight matrix with `n` low-rank
//! (LoRA) experts and a learned gating network. Each token is routed to its
//! `top_k` experts and the layer output is the frozen projection plus the
//! gate-weighted sum of the selected expert outputs. Two auxiliary losses
//! shape the routing: a load-balancing term that discourages expert collapse
//! and a queue-based contrastive term that pushes experts toward distinct
//! feature subspaces.
//!
//! Everything differentiable runs on a [`numerics::Tape`]: a flat record of
//! operations over row-major 2-D tensors that is replayed in reverse to
//! produce gradients. The [`harness`] module trains small models built from
//! these layers on synthetic multi-cluster regression tasks, and [`tracer`]
//! collects per-token routing decisions for offline analysis.
//!
//! The numeric core is generic over the scalar type (`f32` or `f64`); the
//! aliases at the crate root pin the default double-precision configuration.

pub mod adapters;
pub mod checkpoint;
pub mod harness;
pub mod losses;
pub mod numerics;
pub mod scalar;
pub mod tracer;

pub use scalar::Scalar;

/// Double-precision tensor, the default for training and tests.
pub type Tensor = numerics::Tensor2D<f64>;
/// Single-precision tensor.
pub type Tensor32 = numerics::Tensor2D<f32>;
/// Double-precision gradient tape.
pub type Tape = numerics::Tape<f64>;
/// Double-precision mixture layer.
pub type MoeLoraLayer = adapters::MoeLoraLayer<f64>;
/// Double-precision low-rank expert.
pub type LoraExpert = adapters::LoraExpert<f64>;
/// Double-precision contrastive queue.
pub type ExpertQueue = losses::ExpertQueue<f64>;
/// Double-precision toy model.
pub type ToyModel = harness::ToyModel<f64>;
/// Double-precision synthetic task.
pub type SyntheticTask = harness::SyntheticTask<f64>;
