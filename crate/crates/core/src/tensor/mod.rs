//! Dense tensors, numeric kernels and tape-based reverse-mode differentiation.

mod gradcheck;
pub mod kernels;
mod real;
mod rng;
mod tape;
#[allow(clippy::module_inception)]
mod tensor;

pub use gradcheck::{finite_diff_grad, finite_diff_grad_five_point, max_relative_error, relative_error};
pub use real::{DType, Real};
pub use rng::Rng;
pub use tape::{Gradients, Segment, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Eager `a · b` for rank-2 tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::unchecked();
    let (va, vb) = (tape.leaf(a), tape.leaf(b));
    let c = tape.matmul(va, vb)?;
    Ok(tape.value(c).clone())
}

/// Eager softmax over the last dimension.
pub fn softmax_lastdim<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let y = tape.softmax_lastdim(v)?;
    Ok(tape.value(y).clone())
}

/// Eager elementwise `x·σ(x)`.
pub fn silu<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let y = tape.silu(v)?;
    Ok(tape.value(y).clone())
}
