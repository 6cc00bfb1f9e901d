//! Dense `f64` tensors, a tape-based reverse-mode autograd [`Graph`], the
//! Adam optimizer, and finite-difference gradient checking.
//!
//! Compute kernels run data-parallel through rayon when the default
//! `parallel` feature is on and fall back to sequential loops otherwise.

mod broadcast;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use error::TensorError;
pub use graph::{bilinear_at, Gradients, Graph, Var};
pub use optim::{clip_global_norm, global_norm, Adam};
pub use params::ParamStore;
pub use tensor::Tensor;
