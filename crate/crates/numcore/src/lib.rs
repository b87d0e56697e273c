//! Dense tensor numerics with tape-based reverse-mode differentiation.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod scalar;
pub mod tensor;

pub use error::{NumError, Result};
pub use graph::{cosine_sim, sigmoid, Gradients, Graph, ParamId, ParamStore, Var};
pub use optim::{AdamConfig, OptimizerState};
pub use scalar::{gemm, Scalar};
pub use tensor::Tensor;

/// Default precision of model tensors.
#[cfg(not(feature = "f64"))]
pub type Real = f32;
#[cfg(feature = "f64")]
pub type Real = f64;
