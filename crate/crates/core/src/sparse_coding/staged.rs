use serde::{Deserialize, Serialize};

use super::{half_sq_norm, SparseCodingState};
use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// What happens to one coefficient across a pruning step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    /// Active before and after the step.
    Survivor,
    /// Active before, masked after. Its coefficient is frozen.
    Pruned,
    /// Masked before, active again after.
    Reactivated,
    /// Masked before and after.
    Inactive,
}

/// Role of every basis index for one step from stage `t` to `t + 1`.
///
/// The active set at stage `t` is survivors ∪ pruned; at `t + 1` it is
/// survivors ∪ reactivated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePartition {
    roles: Vec<Role>,
}

impl StagePartition {
    pub fn new(roles: Vec<Role>) -> Self {
        Self { roles }
    }

    /// Everything a survivor: the step changes nothing.
    pub fn trivial(basis_count: usize) -> Self {
        Self::new(vec![Role::Survivor; basis_count])
    }

    /// Builds roles from index sets. Indices in none of the sets are inactive.
    pub fn from_sets(
        basis_count: usize,
        survivors: &[usize],
        pruned: &[usize],
        reactivated: &[usize],
    ) -> Result<Self> {
        let mut roles = vec![Role::Inactive; basis_count];
        for (set, role) in [
            (survivors, Role::Survivor),
            (pruned, Role::Pruned),
            (reactivated, Role::Reactivated),
        ] {
            for &i in set {
                if i >= basis_count {
                    return Err(Error::InvalidArgument(format!(
                        "index {i} outside {basis_count} basis vectors"
                    )));
                }
                if roles[i] != Role::Inactive {
                    return Err(Error::InvalidArgument(format!(
                        "index {i} is both {:?} and {role:?}",
                        roles[i]
                    )));
                }
                roles[i] = role;
            }
        }
        Ok(Self { roles })
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn role(&self, i: usize) -> Role {
        self.roles[i]
    }

    pub fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.roles.len()).filter(|&i| self.roles[i] == role).collect()
    }

    /// Active after the step: survivors and reactivated.
    pub fn is_next_active(&self, i: usize) -> bool {
        matches!(self.roles[i], Role::Survivor | Role::Reactivated)
    }

    /// Active before the step: survivors and pruned.
    pub fn is_current_active(&self, i: usize) -> bool {
        matches!(self.roles[i], Role::Survivor | Role::Pruned)
    }

    fn check(&self, state: &SparseCodingState) -> Result<()> {
        state.validate()?;
        if self.roles.len() != state.basis_count() {
            return Err(Error::Shape(format!(
                "partition covers {} indices, state has {} basis vectors",
                self.roles.len(),
                state.basis_count()
            )));
        }
        Ok(())
    }
}

/// Post-step energy, directly and as its four-term expansion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagedEnergy {
    /// `½ Σ [I − Σ_k a_k φ_k]² + λ Σ_k S(a_k/σ)` over the post-step active set.
    pub direct: f64,
    /// `½ Σ (I − Σ_i w_i φ_i)²` with the pre-step active set.
    pub data_residual: f64,
    /// `½ Σ (Σ_h b_h φ_h − Σ_j c_j φ_j)²`.
    pub compensation: f64,
    /// `Σ (I − Σ_i w_i φ_i)(Σ_h b_h φ_h − Σ_j c_j φ_j)`.
    pub cross: f64,
    /// `λ Σ_k S(a_k/σ)`; pruned coefficients do not contribute.
    pub sparsity: f64,
}

impl StagedEnergy {
    pub fn expansion_sum(&self) -> f64 {
        self.data_residual + self.compensation + self.cross + self.sparsity
    }

    pub fn identity_error(&self) -> f64 {
        (self.direct - self.expansion_sum()).abs() / self.direct.abs().max(f64::MIN_POSITIVE)
    }
}

/// Residual pieces shared by the energy and its gradients.
struct Pieces {
    /// `I_s − Σ_{survivor ∪ pruned} w φ`, one row per sample.
    data: Matrix,
    /// `Σ_h b_h φ_h − Σ_j c_j φ_j`, same for every sample.
    compensation: Vec<f64>,
}

fn pieces(state: &SparseCodingState, partition: &StagePartition) -> Pieces {
    let current = state.reconstruct(&state.coeffs, |i| partition.is_current_active(i));
    let data = state.residuals(&current);
    let pruned = state.reconstruct(&state.coeffs, |i| partition.role(i) == Role::Pruned);
    let reactivated = state.reconstruct(&state.coeffs, |i| partition.role(i) == Role::Reactivated);
    let compensation = pruned.iter().zip(&reactivated).map(|(b, c)| b - c).collect();
    Pieces { data, compensation }
}

pub fn staged_energy(state: &SparseCodingState, partition: &StagePartition) -> Result<StagedEnergy> {
    partition.check(state)?;
    let next = state.reconstruct(&state.coeffs, |i| partition.is_next_active(i));
    let sparsity = state.sparsity_cost((0..state.basis_count()).filter(|&i| partition.is_next_active(i)));
    let direct = half_sq_norm(&state.residuals(&next)) + sparsity;

    let Pieces { data, compensation } = pieces(state, partition);
    let samples = data.rows() as f64;
    let compensation_term = samples * 0.5 * compensation.iter().map(|v| v * v).sum::<f64>();
    let mut cross = 0.0;
    for s in 0..data.rows() {
        for (r, d) in data.row(s).iter().zip(&compensation) {
            cross += r * d;
        }
    }
    Ok(StagedEnergy {
        direct,
        data_residual: half_sq_norm(&data),
        compensation: compensation_term,
        cross,
        sparsity,
    })
}

/// Post-step update directions, each split into the pieces of its formula.
///
/// For a survivor `w_k`:
/// `−Σ φ_k (I − Σ_i w_i φ_i) − Σ φ_k (Σ_h b_h φ_h − Σ_j c_j φ_j) + (λ/σ) S′(w_k/σ)`.
///
/// For a reactivated `c_k` the same three pieces appear with the residuals in
/// the other order and `S′(c_k/σ)`.
///
/// For a basis vector of an active `a_k`:
/// `−a_k (I − Σ_i w_i φ_i) − a_k (Σ_h b_h φ_h − Σ_j c_j φ_j)`, per position.
///
/// Pruned and inactive entries get zero in every piece.
#[derive(Clone, Debug, PartialEq)]
pub struct StagedGrads {
    /// Coefficient piece driven by the data residual `I − Σ w φ`.
    pub coeff_data: Vec<f64>,
    /// Coefficient piece driven by the compensation residual `Σ bφ − Σ cφ`.
    pub coeff_compensation: Vec<f64>,
    /// `(λ/σ) S′(a_k/σ)`.
    pub coeff_sparsity: Vec<f64>,
    /// Basis piece driven by the data residual.
    pub basis_data: Matrix,
    /// Basis piece driven by the compensation residual.
    pub basis_compensation: Matrix,
}

impl StagedGrads {
    /// Full coefficient gradient (survivors and reactivated; zero elsewhere).
    pub fn coeff(&self) -> Vec<f64> {
        self.coeff_data
            .iter()
            .zip(&self.coeff_compensation)
            .zip(&self.coeff_sparsity)
            .map(|((a, b), c)| a + b + c)
            .collect()
    }

    pub fn basis(&self) -> Matrix {
        self.basis_data
            .add(&self.basis_compensation)
            .expect("pieces share the basis shape")
    }
}

pub fn staged_grads(state: &SparseCodingState, partition: &StagePartition) -> Result<StagedGrads> {
    partition.check(state)?;
    let Pieces { data, compensation } = pieces(state, partition);
    let data_sum = data.sum_rows();
    let data_sum = data_sum.as_slice();
    let samples = data.rows() as f64;
    let (dim, count) = (state.dim(), state.basis_count());

    let mut coeff_data = vec![0.0; count];
    let mut coeff_compensation = vec![0.0; count];
    let mut coeff_sparsity = vec![0.0; count];
    let mut basis_data = Matrix::zeros(dim, count);
    let mut basis_compensation = Matrix::zeros(dim, count);
    for k in 0..count {
        if !partition.is_next_active(k) {
            continue;
        }
        let mut against_data = 0.0;
        let mut against_comp = 0.0;
        for x in 0..dim {
            let phi = state.basis[(x, k)];
            against_data += phi * data_sum[x];
            against_comp += phi * compensation[x];
        }
        coeff_data[k] = -against_data;
        coeff_compensation[k] = -samples * against_comp;
        coeff_sparsity[k] = state.sparsity_grad(k);

        let a = state.coeffs[k];
        for x in 0..dim {
            basis_data[(x, k)] = -a * data_sum[x];
            basis_compensation[(x, k)] = -a * samples * compensation[x];
        }
    }
    Ok(StagedGrads {
        coeff_data,
        coeff_compensation,
        coeff_sparsity,
        basis_data,
        basis_compensation,
    })
}
