//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar consumes the tape and yields a
//! [`GradientMap`] with one entry per [`Tape::param`] leaf. Forward values
//! come from the kernels in [`kernels`], which are also usable directly on
//! [`Array`]s without a tape.

mod array;
mod gradcheck;
pub mod kernels;
mod tape;

pub use array::Array;
pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport, RELATIVE_FLOOR};
pub use kernels::ConvSpec;
pub use tape::{Activation, BatchStats, GradientMap, NormMode, Tape, Var};

#[cfg(test)]
mod tests;
