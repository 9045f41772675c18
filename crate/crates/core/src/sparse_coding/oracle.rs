//! Finite-difference and algebraic-identity checks for the energy model.
//!
//! Each staged gradient is also compared piece by piece against the finite
//! difference of the single expansion term that piece should come from, so a
//! disagreement points at the offending term instead of only the total.

use std::fmt;

use super::{
    energy, grad_phi, grad_w, staged_energy, staged_grads, Role, SparseCodingState, StagePartition,
    StagedEnergy,
};
use crate::error::Result;
use crate::numeric::{finite_diff_grad, relative_error, Matrix, RngState, DEFAULT_STEP};

pub const IDENTITY_TOLERANCE: f64 = 1e-10;
pub const GRADIENT_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Per-piece attribution for staged gradients, empty otherwise.
    pub pieces: Vec<PieceError>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PieceError {
    pub piece: &'static str,
    pub term: &'static str,
    pub max_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OracleReport {
    pub lines: Vec<CheckLine>,
}

impl OracleReport {
    pub fn all_passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    pub fn line(&self, name: &str) -> Option<&CheckLine> {
        self.lines.iter().find(|l| l.name == name)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.lines {
            writeln!(
                f,
                "{} {:<26} max rel err {:.3e} (tol {:.0e})",
                if l.passed { "PASS" } else { "FAIL" },
                l.name,
                l.max_error,
                l.tolerance
            )?;
            let worst = l.pieces.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error));
            for p in &l.pieces {
                let flag = if !l.passed && Some(p) == worst { "  <- diverges" } else { "" };
                writeln!(
                    f,
                    "       piece {:<13} vs d({}) {:.3e}{flag}",
                    p.piece, p.term, p.max_error
                )?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct OracleConfig {
    pub seed: u64,
    pub identity_instances: usize,
    pub gradient_instances: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            identity_instances: 200,
            gradient_instances: 8,
        }
    }
}

fn random_roles(rng: &mut RngState, count: usize) -> StagePartition {
    // Cycle through every role first so each one is present.
    let base = [Role::Survivor, Role::Pruned, Role::Reactivated, Role::Inactive];
    let mut roles: Vec<Role> = (0..count)
        .map(|i| if i < 4 { base[i] } else { base[rng.below(4)] })
        .collect();
    rng.shuffle(&mut roles);
    StagePartition::new(roles)
}

fn term(e: &StagedEnergy, name: &str) -> f64 {
    match name {
        "data" => e.data_residual,
        "compensation" => e.compensation,
        "cross" => e.cross,
        "sparsity" => e.sparsity,
        _ => e.direct,
    }
}

fn fd_coeffs(state: &SparseCodingState, p: &StagePartition, which: &str) -> Result<Vec<f64>> {
    let g = finite_diff_grad(
        |c| {
            let mut q = state.clone();
            q.coeffs = c.as_slice().to_vec();
            staged_energy(&q, p).map_or(f64::NAN, |e| term(&e, which))
        },
        &Matrix::row_vector(state.coeffs.clone()),
        DEFAULT_STEP,
    )?;
    Ok(g.into_vec())
}

fn fd_basis(state: &SparseCodingState, p: &StagePartition, which: &str) -> Result<Matrix> {
    finite_diff_grad(
        |b| {
            let mut q = state.clone();
            q.basis = b.clone();
            staged_energy(&q, p).map_or(f64::NAN, |e| term(&e, which))
        },
        &state.basis,
        DEFAULT_STEP,
    )
}

/// Entries of `v` at the given flat indices.
fn pick(v: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| v[i]).collect()
}

fn basis_columns(m: &Matrix, cols: &[usize]) -> Vec<f64> {
    let mut out = Vec::new();
    for r in 0..m.rows() {
        for &c in cols {
            out.push(m[(r, c)]);
        }
    }
    out
}

struct Accum {
    name: &'static str,
    tolerance: f64,
    max_error: f64,
    pieces: Vec<PieceError>,
}

impl Accum {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            max_error: 0.0,
            pieces: Vec::new(),
        }
    }

    fn total(&mut self, err: f64) {
        self.max_error = self.max_error.max(err);
    }

    fn piece(&mut self, piece: &'static str, term: &'static str, err: f64) {
        match self.pieces.iter_mut().find(|p| p.piece == piece && p.term == term) {
            Some(p) => p.max_error = p.max_error.max(err),
            None => self.pieces.push(PieceError {
                piece,
                term,
                max_error: err,
            }),
        }
    }

    fn finish(self) -> CheckLine {
        CheckLine {
            name: self.name,
            passed: self.max_error <= self.tolerance,
            max_error: self.max_error,
            tolerance: self.tolerance,
            pieces: self.pieces,
        }
    }
}

/// Runs every check and collects one line per check.
pub fn run_energy_checks(config: &OracleConfig) -> Result<OracleReport> {
    let mut rng = RngState::new(config.seed);
    let mut report = OracleReport::default();

    let mut identity = Accum::new("staged-identity", IDENTITY_TOLERANCE);
    for _ in 0..config.identity_instances {
        let samples = 1 + rng.below(16);
        let dim = 1 + rng.below(16);
        let basis = 1 + rng.below(32);
        let sigma = 0.5 + rng.uniform();
        let state = SparseCodingState::random(&mut rng, samples, dim, basis, 0.1, sigma)?;
        let p = random_roles(&mut rng, basis);
        identity.total(staged_energy(&state, &p)?.identity_error());
    }
    report.lines.push(identity.finish());

    let mut plain_coeff = Accum::new("grad-coeff", GRADIENT_TOLERANCE);
    let mut plain_basis = Accum::new("grad-basis", GRADIENT_TOLERANCE);
    let mut survivor = Accum::new("staged-grad-survivor", GRADIENT_TOLERANCE);
    let mut reactivated = Accum::new("staged-grad-reactivated", GRADIENT_TOLERANCE);
    let mut basis = Accum::new("staged-grad-basis", GRADIENT_TOLERANCE);

    for _ in 0..config.gradient_instances {
        let lambda = 0.2 + rng.uniform();
        let sigma = 0.5 + rng.uniform();
        let state = SparseCodingState::random(&mut rng, 3, 8, 12, lambda, sigma)?;

        let fd_w = finite_diff_grad(
            |c| {
                let mut q = state.clone();
                q.coeffs = c.as_slice().to_vec();
                energy(&q).unwrap_or(f64::NAN)
            },
            &Matrix::row_vector(state.coeffs.clone()),
            DEFAULT_STEP,
        )?;
        plain_coeff.total(relative_error(&grad_w(&state)?, fd_w.as_slice(), 1e-12));
        let fd_phi = finite_diff_grad(
            |b| {
                let mut q = state.clone();
                q.basis = b.clone();
                energy(&q).unwrap_or(f64::NAN)
            },
            &state.basis,
            DEFAULT_STEP,
        )?;
        plain_basis.total(relative_error(grad_phi(&state)?.as_slice(), fd_phi.as_slice(), 1e-12));

        let p = random_roles(&mut rng, 12);
        let g = staged_grads(&state, &p)?;
        let surv = p.indices(Role::Survivor);
        let react = p.indices(Role::Reactivated);
        let active: Vec<usize> = (0..12).filter(|&i| p.is_next_active(i)).collect();

        let fd_total = fd_coeffs(&state, &p, "direct")?;
        let fd_data = fd_coeffs(&state, &p, "data")?;
        let fd_comp = fd_coeffs(&state, &p, "compensation")?;
        let fd_cross = fd_coeffs(&state, &p, "cross")?;
        let fd_sparse = fd_coeffs(&state, &p, "sparsity")?;
        let coeff = g.coeff();

        for (acc, idx) in [(&mut survivor, &surv), (&mut reactivated, &react)] {
            let analytic = pick(&coeff, idx);
            let scale = analytic.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            acc.total(relative_error(&analytic, &pick(&fd_total, idx), 1e-12));
            let (data_term, comp_term) = if acc.name == "staged-grad-survivor" {
                ("data", "cross")
            } else {
                ("cross", "compensation")
            };
            let fd_for = |t: &str| match t {
                "data" => &fd_data,
                "compensation" => &fd_comp,
                _ => &fd_cross,
            };
            acc.piece(
                "data-residual",
                data_term,
                relative_error(&pick(&g.coeff_data, idx), &pick(fd_for(data_term), idx), scale),
            );
            acc.piece(
                "compensation",
                comp_term,
                relative_error(&pick(&g.coeff_compensation, idx), &pick(fd_for(comp_term), idx), scale),
            );
            acc.piece(
                "sparsity",
                "sparsity",
                relative_error(&pick(&g.coeff_sparsity, idx), &pick(&fd_sparse, idx), scale),
            );
        }

        let b_total = fd_basis(&state, &p, "direct")?;
        let b_data = fd_basis(&state, &p, "data")?;
        let b_comp = fd_basis(&state, &p, "compensation")?;
        let b_cross = fd_basis(&state, &p, "cross")?;
        let analytic = basis_columns(&g.basis(), &active);
        let scale = analytic.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
        basis.total(relative_error(&analytic, &basis_columns(&b_total, &active), 1e-12));
        // Survivors: data piece <- data term, compensation piece <- cross term.
        // Reactivated: data piece <- cross term, compensation piece <- compensation term.
        let pairs: [(&'static str, &Matrix, &[usize], &'static str, &Matrix); 4] = [
            ("data-residual", &g.basis_data, &surv, "data", &b_data),
            ("compensation", &g.basis_compensation, &surv, "cross", &b_cross),
            ("data-residual", &g.basis_data, &react, "cross", &b_cross),
            ("compensation", &g.basis_compensation, &react, "compensation", &b_comp),
        ];
        for (piece, analytic, cols, term_name, fd) in pairs {
            basis.piece(
                piece,
                term_name,
                relative_error(&basis_columns(analytic, cols), &basis_columns(fd, cols), scale),
            );
        }
    }

    report.lines.push(plain_coeff.finish());
    report.lines.push(plain_basis.finish());
    report.lines.push(survivor.finish());
    report.lines.push(reactivated.finish());
    report.lines.push(basis.finish());
    Ok(report)
}
