//! Sparse-coding energy model of pruning.
//!
//! A signal `I(x)` is reconstructed as `Σ_i w_i φ_i(x)` from a dictionary whose
//! column `i` is `φ_i`. The energy is
//!
//! ```text
//! E = ½ Σ_s Σ_x [I_s(x) − Σ_i w_i φ_i(x)]² + λ Σ_i S(w_i / σ)
//! ```
//!
//! summed over every sample signal `s`. The staged variant in [`staged`]
//! measures the same energy after one pruning step, split into a data term, a
//! compensation term, a cross term and the sparsity term.

pub mod oracle;
mod simulation;
mod staged;

use serde::{Deserialize, Serialize};

pub use oracle::{run_energy_checks, CheckLine, OracleConfig, OracleReport, PieceError, GRADIENT_TOLERANCE, IDENTITY_TOLERANCE};
pub use simulation::{run_stage_simulation, StageConfig, StageLog, StageRecord};
pub use staged::{staged_energy, staged_grads, Role, StagePartition, StagedEnergy, StagedGrads};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, RngState};

/// Per-coefficient sparseness penalty `S`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    /// `log(1 + x²)`
    #[default]
    Log,
    /// `|x|`
    Abs,
    /// `−exp(−x²)`
    NegGaussian,
}

impl Penalty {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Penalty::Log => (x * x).ln_1p(),
            Penalty::Abs => x.abs(),
            Penalty::NegGaussian => -(-x * x).exp(),
        }
    }

    pub fn deriv(self, x: f64) -> f64 {
        match self {
            Penalty::Log => 2.0 * x / (1.0 + x * x),
            Penalty::Abs => {
                if x == 0.0 {
                    0.0
                } else {
                    x.signum()
                }
            }
            Penalty::NegGaussian => 2.0 * x * (-x * x).exp(),
        }
    }
}

/// `log(1 + x²)`.
pub fn sparseness(x: f64) -> f64 {
    Penalty::Log.value(x)
}

/// `2x / (1 + x²)`.
pub fn sparseness_deriv(x: f64) -> f64 {
    Penalty::Log.deriv(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseCodingState {
    /// One signal per row, indexed by `x` along the columns.
    pub samples: Matrix,
    /// `x` rows by basis columns; column `i` is `φ_i`.
    pub basis: Matrix,
    pub coeffs: Vec<f64>,
    pub lambda: f64,
    pub sigma: f64,
    #[serde(default)]
    pub penalty: Penalty,
}

impl SparseCodingState {
    pub const DEFAULT_LAMBDA: f64 = 0.1;
    pub const DEFAULT_SIGMA: f64 = 1.0;

    pub fn new(samples: Matrix, basis: Matrix, coeffs: Vec<f64>, lambda: f64, sigma: f64) -> Result<Self> {
        let state = Self {
            samples,
            basis,
            coeffs,
            lambda,
            sigma,
            penalty: Penalty::Log,
        };
        state.validate()?;
        Ok(state)
    }

    /// Gaussian signals, a dictionary with unit-variance columns scaled by
    /// `1/√dim`, and small Gaussian coefficients.
    pub fn random(
        rng: &mut RngState,
        sample_count: usize,
        dim: usize,
        basis_count: usize,
        lambda: f64,
        sigma: f64,
    ) -> Result<Self> {
        let samples = Matrix::from_fn(sample_count, dim, |_, _| rng.gaussian());
        let scale = 1.0 / (dim as f64).sqrt();
        let basis = Matrix::from_fn(dim, basis_count, |_, _| rng.gaussian() * scale);
        let coeffs = (0..basis_count).map(|_| rng.gaussian() * 0.5).collect();
        Self::new(samples, basis, coeffs, lambda, sigma)
    }

    pub fn basis_count(&self) -> usize {
        self.basis.cols()
    }

    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.cols() != self.basis.rows() {
            return Err(Error::Shape(format!(
                "signals have {} positions but basis vectors have {}",
                self.samples.cols(),
                self.basis.rows()
            )));
        }
        if self.coeffs.len() != self.basis.cols() {
            return Err(Error::Shape(format!(
                "{} coefficients for {} basis vectors",
                self.coeffs.len(),
                self.basis.cols()
            )));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("λ must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("σ must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }

    /// `Σ_i c_i φ_i(x)` over the indices selected by `include`.
    pub(crate) fn reconstruct(&self, coeffs: &[f64], include: impl Fn(usize) -> bool) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (x, o) in out.iter_mut().enumerate() {
            let row = self.basis.row(x);
            for (i, (&phi, &c)) in row.iter().zip(coeffs).enumerate() {
                if include(i) {
                    *o += c * phi;
                }
            }
        }
        out
    }

    /// `I_s(x) − recon(x)` for every sample.
    pub(crate) fn residuals(&self, recon: &[f64]) -> Matrix {
        let mut r = self.samples.clone();
        for s in 0..r.rows() {
            for (v, &p) in r.row_mut(s).iter_mut().zip(recon) {
                *v -= p;
            }
        }
        r
    }

    fn sparsity_cost(&self, indices: impl Iterator<Item = usize>) -> f64 {
        self.lambda
            * indices
                .map(|i| self.penalty.value(self.coeffs[i] / self.sigma))
                .sum::<f64>()
    }

    fn sparsity_grad(&self, i: usize) -> f64 {
        self.lambda / self.sigma * self.penalty.deriv(self.coeffs[i] / self.sigma)
    }
}

pub(crate) fn half_sq_norm(m: &Matrix) -> f64 {
    0.5 * m.as_slice().iter().map(|v| v * v).sum::<f64>()
}

/// Total reconstruction plus sparsity cost.
pub fn energy(state: &SparseCodingState) -> Result<f64> {
    state.validate()?;
    let recon = state.reconstruct(&state.coeffs, |_| true);
    let residual = state.residuals(&recon);
    Ok(half_sq_norm(&residual) + state.sparsity_cost(0..state.basis_count()))
}

/// `∂E/∂w_i = −Σ_s Σ_x φ_i(x) r_s(x) + (λ/σ) S′(w_i/σ)`.
pub fn grad_w(state: &SparseCodingState) -> Result<Vec<f64>> {
    state.validate()?;
    let recon = state.reconstruct(&state.coeffs, |_| true);
    let residual = state.residuals(&recon);
    let summed = residual.sum_rows();
    Ok((0..state.basis_count())
        .map(|i| {
            let data: f64 = (0..state.dim())
                .map(|x| state.basis[(x, i)] * summed.as_slice()[x])
                .sum();
            -data + state.sparsity_grad(i)
        })
        .collect())
}

/// `∂E/∂φ_i(x) = −Σ_s w_i r_s(x)`, shaped like the basis.
pub fn grad_phi(state: &SparseCodingState) -> Result<Matrix> {
    state.validate()?;
    let recon = state.reconstruct(&state.coeffs, |_| true);
    let summed = state.residuals(&recon).sum_rows();
    Ok(Matrix::from_fn(state.dim(), state.basis_count(), |x, i| {
        -state.coeffs[i] * summed.as_slice()[x]
    }))
}
