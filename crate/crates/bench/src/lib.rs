//! Fixtures shared by the kernel benchmarks.

use sparselab::numeric::{Matrix, RngState};
use sparselab::token_merge::TokenBatch;

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = RngState::new(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.gaussian())
}

/// ViT-shaped token set: one protected class token plus `patches` tokens.
pub fn token_batch(patches: usize, dim: usize, seed: u64) -> TokenBatch {
    TokenBatch::with_class_token(gaussian_matrix(patches + 1, dim, seed))
}

/// Batch of `n` inputs in `[0, 1)` with cycling labels.
pub fn input_batch(n: usize, dim: usize, classes: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let mut rng = RngState::new(seed);
    let x = Matrix::from_fn(n, dim, |_, _| rng.uniform());
    (x, (0..n).map(|i| i % classes).collect())
}
