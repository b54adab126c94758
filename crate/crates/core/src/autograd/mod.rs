//! Minimal reverse-mode automatic differentiation over `f64` matrices.

mod graph;
mod optim;
mod params;

pub use graph::{sigmoid, softplus, AttentionMask, Gradients, Graph, Mat, Var, MASKED_LOGIT};
pub use optim::Adam;
pub use params::{group_of, ParamId, ParamStore};

#[cfg(test)]
pub(crate) mod gradcheck;
