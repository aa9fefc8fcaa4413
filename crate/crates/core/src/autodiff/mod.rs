//! Dense reverse-mode differentiation.
//!
//! A [`Graph`] records every forward op together with its output tensor.
//! [`Graph::backward`] walks the tape once in reverse and returns gradients
//! for the named parameter leaves. Broadcasting is limited to scalar
//! constants; every other op requires explicit, matching shapes.
//!
//! Subgradient conventions: `relu'(0) = 0` and the distance between
//! coinciding rows has a zero gradient.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, WorstCoordinate};
pub use graph::{Gradients, Graph, NodeId, ParamMap};
pub use tensor::{log_sum_exp, softmax_slice, Tensor};

#[cfg(test)]
mod tests;
