//! Dense `f64` tensors, a define-by-run autodiff tape, and the AdamW optimizer.
//!
//! The tape records the handful of operations a small transformer needs:
//! matmuls, axis shuffles, masked softmax, layer norm, GELU/ReLU, dropout and
//! cross-entropy. Everything runs single-threaded on the CPU; independent
//! graphs can live on different threads.

mod error;
mod gradcheck;
mod graph;
mod kernels;
mod optim;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{gelu, normal_cdf};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::{Mask, Tensor};
