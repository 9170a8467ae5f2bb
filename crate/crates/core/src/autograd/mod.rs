//! Minimal define-by-run reverse-mode autodiff over dense NCHW tensors.
//!
//! Convolutions lower to im2col + GEMM (`matrixmultiply`). Everything is
//! generic over [`Scalar`] so that networks train in `f32` and are
//! gradient-checked in `f64` through identical code paths.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, ParamKey, Var};
pub use kernels::ConvGeometry;
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::{gemm, Scalar, Tensor};
