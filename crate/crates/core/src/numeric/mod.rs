//! Dense linear algebra, seeded randomness and a finite-difference oracle.

mod finite_diff;
mod matrix;
mod rng;

pub use finite_diff::{finite_diff_grad, relative_error, DEFAULT_STEP};
pub use matrix::{dot, softmax_in_place, Matrix};
pub use rng::{splitmix64, RngState};
