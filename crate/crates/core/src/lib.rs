//! Few-shot joint intent detection and slot filling with prototype merging
//! and contrastive alignment, on a small built-in reverse-mode autodiff core.
//!
//! The numeric core (`autodiff`, `encoder`, `protonet`, `merging`,
//! `contrastive`, `model::forward`) is generic over [`Scalar`] (`f32` or
//! `f64`); training, evaluation and checkpoints work in `f64`, and the
//! aliases below fix the scalar for the common case.

pub mod autodiff;
pub mod contrastive;
pub mod corpus;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod merging;
pub mod model;
pub mod protonet;
pub mod scalar;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub type ParamMap = autodiff::ParamMap<f64>;
pub type Gradients = autodiff::Gradients<f64>;
pub type Cooccurrence = merging::Cooccurrence<f64>;
pub type AttentionState = merging::AttentionState<f64>;
pub type Forward = model::Forward<f64>;
