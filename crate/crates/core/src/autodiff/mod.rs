//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records operations as they run; [`Graph::backward`] walks the
//! tape in reverse once. Parameters live in a [`ParamStore`] whose freeze
//! mask decides which leaves receive gradients.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheck, GradCheckReport};
pub use graph::{log_softmax_vec, Gradients, Graph, Var, GELU_CUBIC, GELU_SQRT_2_OVER_PI};
pub use optim::Adam;
pub use params::{Param, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
