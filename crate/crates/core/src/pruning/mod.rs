//! Dynamic magnitude pruning with a cubic sparsity schedule.
//!
//! A mask update ranks every prunable element of a [`PruneGroup`] by
//! importance, keeps exactly `keep_count(n, r_t)` of them and zeroes the rest.
//! Pruned weights keep their stored values, so a later update can bring them
//! back if their score re-enters the top `k`.

mod artifact;
mod mask;
mod schedule;
mod strategy;

pub use artifact::{
    decode_mask_artifact, encode_mask_artifact, read_mask_artifact, write_mask_artifact,
};
pub use mask::{
    apply_mask, importance_scores, prune_to_sparsity, select_threshold, update_mask,
    ImportanceScore, Magnitude, Mask, PruneGroup,
};
pub use schedule::{keep_count, SparsitySchedule};
pub use strategy::{make_strategy_mask, StrategyKind, UpdatePolicy};
