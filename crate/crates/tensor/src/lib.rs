//! CPU tensors, kernels and reverse-mode autograd used by the `kshot`
//! workspace.
//!
//! Compute-heavy kernels are data-parallel over the batch axis when the
//! `parallel` feature (default) is enabled; see [`par`].

pub mod error;
pub mod float;
pub mod io;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod par;
pub mod tensor;
pub mod var;

pub use error::{Result, TensorError};
pub use float::Float;
pub use kernels::ConvSpec;
pub use nn::{Conv2d, Linear, ParamId, ParamStore, Params};
pub use optim::{Adam, RmsProp};
pub use tensor::Tensor;
pub use var::{grad, param, Var};
