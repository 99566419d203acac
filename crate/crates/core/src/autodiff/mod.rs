//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The design is deliberately small: `Tensor` is a flat row-major `Vec<f64>`
//! plus a shape, the `Tape` is an append-only arena of op records, and
//! `Tape::backward` walks the records once in reverse. Exactly the primitives
//! the encoder and the contrastive / classification losses need are provided;
//! each has a hand-derived adjoint that is held to central finite differences
//! by the tests.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_grad, grad_check, grad_check_with_floor, max_rel_err, rel_err, rel_err_floored};
pub use tape::{Phase, RunningStats, Tape, TapeId};
pub use tensor::{Init, Parameter, Shape, Tensor};
