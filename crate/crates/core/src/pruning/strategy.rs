use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::{keep_count, read_mask_artifact, PruneGroup};
use crate::error::{Error, Result};
use crate::numeric::RngState;

/// How a run obtains and evolves its mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyKind {
    /// Start dense and re-rank periodically along the sparsity schedule.
    IterativePruning,
    /// Train from initialization under the final mask of an iterative run.
    OptimalSubnetwork { mask_path: PathBuf },
    /// Train from initialization under a uniformly random mask.
    RandomSubnetwork,
}

impl StrategyKind {
    pub fn label(&self) -> &'static str {
        match self {
            StrategyKind::IterativePruning => "iterative",
            StrategyKind::OptimalSubnetwork { .. } => "optimal",
            StrategyKind::RandomSubnetwork => "random",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdatePolicy {
    /// Re-rank at every schedule update step.
    Periodic,
    /// Never change the mask.
    Frozen,
}

/// Initial mask for `template`'s layout at final sparsity `sparsity`.
pub fn make_strategy_mask(
    kind: &StrategyKind,
    template: &PruneGroup,
    sparsity: f64,
    rng: &mut RngState,
) -> Result<(PruneGroup, UpdatePolicy)> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::InvalidArgument(format!(
            "sparsity must be in [0, 1), got {sparsity}"
        )));
    }
    match kind {
        StrategyKind::IterativePruning => Ok((template.densified(), UpdatePolicy::Periodic)),
        StrategyKind::OptimalSubnetwork { mask_path } => {
            let loaded = read_mask_artifact(mask_path)?;
            if !loaded.same_layout(template) {
                return Err(Error::format(
                    mask_path,
                    "mask artifact layout does not match the model's prunable tensors",
                ));
            }
            let n = loaded.len();
            if n > 0 && (loaded.sparsity() - sparsity).abs() > 1.0 / n as f64 {
                return Err(Error::format(
                    mask_path,
                    format!(
                        "mask artifact sparsity {} does not match requested {sparsity}",
                        loaded.sparsity()
                    ),
                ));
            }
            Ok((loaded, UpdatePolicy::Frozen))
        }
        StrategyKind::RandomSubnetwork => {
            let n = template.len();
            let mut group = template.densified();
            if n > 0 {
                let mut bits = vec![false; n];
                for i in rng.sample_indices(n, keep_count(n, sparsity)) {
                    bits[i] = true;
                }
                group.set_flat_bits(&bits)?;
            }
            Ok((group, UpdatePolicy::Frozen))
        }
    }
}
