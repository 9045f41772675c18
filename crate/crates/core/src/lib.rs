//! Pruning-during-training laboratory.
//!
//! - [`numeric`]: dense matrices, seeded randomness, finite-difference oracle
//! - [`pruning`]: cubic sparsity schedule, global magnitude masks with reactivation
//! - [`token_merge`]: single-pass bipartite token merging
//! - [`sparse_coding`]: sparse-coding energy, staged pruning energy and their gradients
//! - [`models`]: maskable MLP and ViT with hand-written backward passes
//! - [`harness`]: datasets, training loop, metric recording and export
//! - [`plot`]: SVG line charts for metric series

pub mod error;
pub mod harness;
pub mod models;
pub mod numeric;
pub mod plot;
pub mod pruning;
pub mod sparse_coding;
pub mod token_merge;

pub use error::{Error, Result};
pub use numeric::{Matrix, RngState};
