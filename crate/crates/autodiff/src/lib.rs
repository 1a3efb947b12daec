//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Graph`] is a dynamic tape: each primitive appends a node holding its
//! output value, and [`Graph::backward`] walks the tape once in reverse.
//! Parameters live in a [`ParamSet`] outside the tape; they are bound onto
//! a fresh graph each step and their gradients accumulate until
//! [`ParamSet::zero_grads`].

mod adam;
pub mod gradcheck;
mod error;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{AutodiffError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{Bound, ParamSet};
pub use tensor::{numel, Tensor};

#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;
