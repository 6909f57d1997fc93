//! Dense `f64` tensors, a reverse-mode tape, and a finite-difference gradient checker.
//!
//! Models build a fresh [`Graph`] per forward pass, reading parameters from a
//! [`ParamStore`]; [`Graph::backward`] returns [`Gradients`] that the store accumulates.

pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, GradCheckError, GradCheckReport};
pub use graph::{AttentionSpec, Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;

/// Layer-norm epsilon used throughout.
pub const LAYER_NORM_EPS: f64 = 1e-5;
