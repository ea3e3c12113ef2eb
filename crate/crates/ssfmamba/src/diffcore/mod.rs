//! Reverse-mode differentiation substrate: dense arrays, an op tape, and a
//! finite-difference checker.

mod array;
mod fd;
mod tape;

pub use array::NdArray;
pub use fd::{finite_difference_check, finite_difference_check_filtered};
pub use tape::{GradStore, Grads, Op, Tape, ValId};
