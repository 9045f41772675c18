use std::path::Path;

use super::export::write_series;
use super::train::{run_experiment, with_output, RunOutput, TrainConfig};
use crate::error::{Error, Result};
use crate::pruning::StrategyKind;

pub const COMPARISON_FILE: &str = "comparison.csv";

#[derive(Clone, Debug)]
pub struct StrategyComparison {
    pub iterative: RunOutput,
    pub optimal: RunOutput,
    pub random: RunOutput,
    /// Windows present in all three runs.
    pub windows: usize,
    /// Windows where iterative < optimal < random in mean |gradient|.
    pub ordered: usize,
}

impl StrategyComparison {
    pub fn ordering_fraction(&self) -> f64 {
        if self.windows == 0 {
            0.0
        } else {
            self.ordered as f64 / self.windows as f64
        }
    }
}

/// Runs the three strategies from the same seed into
/// `base.output_dir/{iterative,optimal,random}`. The optimal run trains
/// under the iterative run's final mask.
pub fn compare_strategies(base: &TrainConfig) -> Result<StrategyComparison> {
    let root = &base.output_dir;
    let iterative = run_experiment(&TrainConfig {
        strategy: StrategyKind::IterativePruning,
        ..with_output(base, root.join("iterative"))
    })?;
    let optimal = run_experiment(&TrainConfig {
        strategy: StrategyKind::OptimalSubnetwork {
            mask_path: iterative.mask_path.clone(),
        },
        ..with_output(base, root.join("optimal"))
    })?;
    let random = run_experiment(&TrainConfig {
        strategy: StrategyKind::RandomSubnetwork,
        ..with_output(base, root.join("random"))
    })?;

    let wi = &iterative.log.windows;
    let wo = &optimal.log.windows;
    let wr = &random.log.windows;
    let windows = wi.len().min(wo.len()).min(wr.len());
    let mut ordered = 0;
    let mut flags = Vec::with_capacity(windows);
    for k in 0..windows {
        let ok = wi[k].grad < wo[k].grad && wo[k].grad < wr[k].grad;
        ordered += usize::from(ok);
        flags.push((wi[k].end as f64, if ok { 1.0 } else { 0.0 }));
    }
    write_ordering(root, &flags)?;
    Ok(StrategyComparison {
        iterative,
        optimal,
        random,
        windows,
        ordered,
    })
}

/// Per-window 0/1 flag of the ordering.
fn write_ordering(root: &Path, flags: &[(f64, f64)]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_series(root.join(COMPARISON_FILE), flags)
}
