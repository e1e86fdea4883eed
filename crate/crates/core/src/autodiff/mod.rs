//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The op set is closed: matmul, add/sub, elementwise multiply, row-bias add, scaling,
//! LeakyReLU, softmax and log-softmax, column concatenation and slicing, reductions
//! and stop-gradient. There is no general broadcasting.

mod tape;
mod tensor;

pub use tape::{log_softmax_rows, softmax_rows, Gradients, Tape, Var};
pub use tensor::{Matrix, ParamId, ParamStore, ParamTensor};
