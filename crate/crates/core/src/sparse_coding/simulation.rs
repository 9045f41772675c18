use serde::{Deserialize, Serialize};

use super::{staged_energy, staged_grads, Role, SparseCodingState, StagePartition, StagedEnergy};
use crate::error::{Error, Result};
use crate::numeric::RngState;

/// Staged pruning of a random sparse-coding instance.
///
/// Stage 0 trains the dense code. Every later stage prunes the smallest
/// `prune_fraction` of the active coefficients by magnitude, reactivates the
/// largest `reactivate_fraction` of the previously masked ones, and then runs
/// `inner_steps` of gradient descent on the post-step active set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub seed: u64,
    pub sample_count: usize,
    pub dim: usize,
    pub basis_count: usize,
    pub stages: usize,
    pub inner_steps: usize,
    pub step_size: f64,
    pub prune_fraction: f64,
    pub reactivate_fraction: f64,
    pub lambda: f64,
    pub sigma: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sample_count: 4,
            dim: 16,
            basis_count: 32,
            stages: 6,
            inner_steps: 200,
            step_size: 1e-2,
            prune_fraction: 0.2,
            reactivate_fraction: 0.25,
            lambda: SparseCodingState::DEFAULT_LAMBDA,
            sigma: SparseCodingState::DEFAULT_SIGMA,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub pruned: usize,
    pub reactivated: usize,
    pub active: usize,
    /// Terms right after the partition is applied, before any inner step.
    pub start: StagedEnergy,
    /// Terms after the inner loop.
    pub end: StagedEnergy,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub records: Vec<StageRecord>,
}

fn lowest_by_magnitude(coeffs: &[f64], candidates: &[usize], count: usize) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| coeffs[a].abs().total_cmp(&coeffs[b].abs()).then(a.cmp(&b)));
    order.truncate(count);
    order
}

fn highest_by_magnitude(coeffs: &[f64], candidates: &[usize], count: usize) -> Vec<usize> {
    let mut order = candidates.to_vec();
    order.sort_by(|&a, &b| coeffs[b].abs().total_cmp(&coeffs[a].abs()).then(a.cmp(&b)));
    order.truncate(count);
    order
}

fn check_finite(e: &StagedEnergy, stage: usize) -> Result<()> {
    let all = [e.direct, e.data_residual, e.compensation, e.cross, e.sparsity];
    if all.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::StageDiverged { stage })
    }
}

pub fn run_stage_simulation(config: &StageConfig) -> Result<StageLog> {
    if config.sample_count == 0 || config.dim == 0 || config.basis_count == 0 {
        return Err(Error::InvalidArgument("sample, dimension and basis counts must be positive".into()));
    }
    for (name, f) in [
        ("prune_fraction", config.prune_fraction),
        ("reactivate_fraction", config.reactivate_fraction),
    ] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidArgument(format!("{name} must be in [0, 1], got {f}")));
        }
    }
    if !(config.step_size > 0.0) {
        return Err(Error::InvalidArgument("step size must be positive".into()));
    }

    let mut rng = RngState::new(config.seed);
    let mut state = SparseCodingState::random(
        &mut rng,
        config.sample_count,
        config.dim,
        config.basis_count,
        config.lambda,
        config.sigma,
    )?;
    let mut active = vec![true; config.basis_count];
    let mut log = StageLog::default();

    for stage in 0..config.stages {
        let current: Vec<usize> = (0..config.basis_count).filter(|&i| active[i]).collect();
        let masked: Vec<usize> = (0..config.basis_count).filter(|&i| !active[i]).collect();
        let (pruned, reactivated) = if stage == 0 {
            (Vec::new(), Vec::new())
        } else {
            let n_prune = (config.prune_fraction * current.len() as f64).floor() as usize;
            let n_react = (config.reactivate_fraction * masked.len() as f64).floor() as usize;
            (
                lowest_by_magnitude(&state.coeffs, &current, n_prune.min(current.len().saturating_sub(1))),
                highest_by_magnitude(&state.coeffs, &masked, n_react),
            )
        };
        let survivors: Vec<usize> = current.iter().copied().filter(|i| !pruned.contains(i)).collect();
        let partition = StagePartition::from_sets(config.basis_count, &survivors, &pruned, &reactivated)?;

        let start = staged_energy(&state, &partition)?;
        check_finite(&start, stage)?;
        for _ in 0..config.inner_steps {
            let g = staged_grads(&state, &partition)?;
            let coeff = g.coeff();
            let basis = g.basis();
            for k in 0..config.basis_count {
                if !partition.is_next_active(k) {
                    continue;
                }
                state.coeffs[k] -= config.step_size * coeff[k];
                for x in 0..state.dim() {
                    state.basis[(x, k)] -= config.step_size * basis[(x, k)];
                }
            }
            if !state.coeffs.iter().all(|c| c.is_finite()) {
                return Err(Error::StageDiverged { stage });
            }
        }
        let end = staged_energy(&state, &partition)?;
        check_finite(&end, stage)?;

        for (k, role) in partition.roles().iter().enumerate() {
            active[k] = matches!(role, Role::Survivor | Role::Reactivated);
        }
        log.records.push(StageRecord {
            stage,
            pruned: pruned.len(),
            reactivated: reactivated.len(),
            active: active.iter().filter(|&&a| a).count(),
            start,
            end,
        });
    }
    Ok(log)
}
