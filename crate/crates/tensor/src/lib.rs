//! Dense tensors, a reverse-mode gradient tape and the optimizers built on it.
//!
//! Everything is generic over [`Element`] so models train in `f32` and
//! gradient checks run in `f64` through the same code.

mod element;
mod error;
pub mod fd;
pub mod init;
mod kernels;
pub mod memory;
pub mod optim;
mod params;
pub mod prim;
pub mod rng;
mod rnn;
mod tape;
mod tensor;

pub use element::{cast, DType, Element};
pub use error::{Result, TensorError};
pub use params::{ParamId, ParamRole, ParamStore};
pub use prim::{inject_backward_sign_fault, Primitive, SignFaultGuard};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::{broadcast_shapes, numel, Shape, Tensor};
