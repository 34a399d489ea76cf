//! Core toolkit for black-box robustness testing of image classifiers.
//!
//! The crate is organised around a small dense-tensor autodiff engine
//! ([`graph`]), a bank of lightweight surrogate models ([`zoo`]), feature
//! attribution by integrated gradients with cross-model consensus
//! ([`influence`]), and a family of evasion attack generators ([`attack`])
//! that spend queries against an opaque scoring service through the
//! budget-tracked client in [`api`].

pub mod api;
pub mod attack;
pub mod exec;
pub mod graph;
pub mod influence;
pub mod metrics;
pub mod tensor;
pub mod threat;
pub mod zoo;

pub use graph::{ComputationGraph, Gradient, Layer, Padding};
pub use tensor::Tensor;
