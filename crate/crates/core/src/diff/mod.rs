//! Dense `f64` tensors with a reverse-mode gradient tape.
//!
//! Only the operations the three networks need are provided: matmul,
//! transpose, elementwise arithmetic with scalar broadcasting, a handful of
//! activations, sum/mean reductions, bias add, column slicing and
//! concatenation, clamping and row softmax.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{
    softmax_in_place, BinaryOp, Gradients, NodeId, Reduce, Tape, UnaryOp, Var, LEAKY_SLOPE,
    LOG_FLOOR,
};
pub use tensor::Tensor;
