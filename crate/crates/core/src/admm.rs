//! Exact solver for the weighted hybrid estimator
//!
//! ```text
//! Â = argmin_{‖A‖_max ≤ β}  (n₁n₂)⁻¹ ‖T∘W^{1/2}∘(Y − A)‖²_F + μ‖A‖_*
//! ```
//!
//! via ADMM on the semidefinite lifting: `A` is the off-diagonal block `Z₁₂`
//! of a symmetric `(n₁+n₂)`-square matrix, PSD through the split variable `X`
//! and entrywise bounded through `Z ∈ P_β`.
//!
//! The lifted objective is `(2/(n₁n₂))‖T∘W^{1/2}∘(Y − Z₁₂)‖²_F + μ⟨I, X⟩`.
//! Since the minimal trace of a PSD lifting is `2‖Z₁₂‖_*`, this is exactly
//! twice the hybrid objective and has the same minimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, nuclear_norm, psd_project, DenseMatrix};
use crate::mask::{observed_cells, Mask};

/// `(n₁n₂)⁻¹ ‖T∘W^{1/2}∘(Y − A)‖²_F + μ‖A‖_*`.
pub fn hybrid_objective(a: &DenseMatrix, y: &DenseMatrix, mask: &Mask, w: &DenseMatrix, mu: f64) -> Result<f64> {
    mask.check_conformable("A", a)?;
    ensure_finite(a, "A")?;
    let cells = observed_cells(y, mask, w)?;
    let fit: f64 = cells
        .iter()
        .map(|c| {
            let r = c.y - a[(c.i, c.j)];
            c.w * r * r
        })
        .sum::<f64>()
        / (mask.nrows() * mask.ncols()) as f64;
    let nuc = if mu == 0.0 { 0.0 } else { mu * nuclear_norm(a)? };
    Ok(fit + nuc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub rho: f64,
    pub tau: f64,
    pub mu: f64,
    pub beta: f64,
    pub max_iter: usize,
    /// Relative objective change at which the iteration stops.
    pub tol: f64,
    /// Use the X-update `Π{Z + ρ⁻¹(V + μI)}` exactly as printed in the
    /// original algorithm listing instead of the augmented-Lagrangian minimizer.
    pub paper_signs: bool,
}

impl AdmmConfig {
    pub fn new(beta: f64, mu: f64) -> Self {
        AdmmConfig {
            rho: 0.1,
            tau: 1.618,
            mu,
            beta,
            max_iter: 2000,
            tol: 1e-5,
            paper_signs: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let golden = (1.0 + 5f64.sqrt()) / 2.0;
        if !(self.rho > 0.0) {
            return Err(Error::invalid(format!("rho must be positive, got {}", self.rho)));
        }
        if !(self.tau > 0.0 && self.tau <= golden + 1e-12) {
            return Err(Error::invalid(format!("tau must lie in (0, (1+√5)/2], got {}", self.tau)));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::invalid(format!("mu must be finite and >= 0, got {}", self.mu)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid(format!("beta must be positive, got {}", self.beta)));
        }
        if self.max_iter == 0 || !(self.tol > 0.0) {
            return Err(Error::invalid("max_iter and tol must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub x: DenseMatrix,
    pub z: DenseMatrix,
    pub v: DenseMatrix,
    pub objective_trace: Vec<f64>,
    pub primal_residual: f64,
    /// `ρ‖Z_k − Z_{k−1}‖_F`.
    pub dual_residual: f64,
}

impl AdmmState {
    fn zeros(n: usize) -> Self {
        AdmmState {
            x: DenseMatrix::zeros(n, n),
            z: DenseMatrix::zeros(n, n),
            v: DenseMatrix::zeros(n, n),
            objective_trace: Vec::new(),
            primal_residual: f64::INFINITY,
            dual_residual: f64::INFINITY,
        }
    }

    /// The `n₁ × n₂` block `Z₁₂`.
    pub fn z12(&self, n1: usize, n2: usize) -> DenseMatrix {
        self.z.view((0, n1), (n1, n2)).into_owned()
    }
}

#[derive(Debug, Clone)]
pub struct AdmmSolution {
    pub a_hat: DenseMatrix,
    pub state: AdmmState,
    pub iterations: usize,
    pub converged: bool,
}

/// Entrywise projection onto `P_β` with the closed-form data-fit update on
/// observed cells of the 12-block, `clamp((c·W·Y + ρC)/(c·W + ρ), ±β)`.
fn phi_project_scaled(
    c: &DenseMatrix,
    mask: &Mask,
    y: &DenseMatrix,
    w: &DenseMatrix,
    beta: f64,
    rho: f64,
    data_scale: f64,
) -> Result<DenseMatrix> {
    let (n1, n2) = mask.shape();
    let n = n1 + n2;
    if c.shape() != (n, n) {
        return Err(Error::ShapeMismatch {
            what: "lifted matrix",
            expected: (n, n),
            got: c.shape(),
        });
    }
    if !(rho > 0.0) || !(beta > 0.0) {
        return Err(Error::invalid("phi projection needs rho > 0 and beta > 0"));
    }
    mask.check_conformable("Y", y)?;
    mask.check_conformable("W", w)?;
    let clamp = |x: f64| x.clamp(-beta, beta);
    let mut out = DenseMatrix::zeros(n, n);
    for col in 0..n {
        for row in 0..=col {
            let in_12 = row < n1 && col >= n1;
            let value = if row == col {
                c[(row, col)].clamp(0.0, beta)
            } else if in_12 {
                let (i, j) = (row, col - n1);
                if mask.is_observed(i, j) {
                    let wy = data_scale * w[(i, j)];
                    clamp((wy * y[(i, j)] + rho * c[(row, col)]) / (wy + rho))
                } else {
                    clamp(c[(row, col)])
                }
            } else {
                clamp(c[(row, col)])
            };
            out[(row, col)] = value;
            out[(col, row)] = value;
        }
    }
    Ok(out)
}

/// The `Φ` map: clamp off-diagonal entries to `[−β, β]`, diagonal entries to
/// `[0, β]`, and set observed cells of the 12-block to
/// `clamp((Y W + ρC)/(W + ρ), ±β)`.
pub fn phi_project(
    c: &DenseMatrix,
    mask: &Mask,
    y: &DenseMatrix,
    w: &DenseMatrix,
    beta: f64,
    rho: f64,
) -> Result<DenseMatrix> {
    phi_project_scaled(c, mask, y, w, beta, rho, 1.0)
}

/// What the observer sees after each completed iteration.
pub struct AdmmIterate<'a> {
    pub iteration: usize,
    pub x: &'a DenseMatrix,
    pub z: &'a DenseMatrix,
    pub v: &'a DenseMatrix,
    pub objective: f64,
    pub primal_residual: f64,
}

pub fn admm_solve(y: &DenseMatrix, mask: &Mask, w: &DenseMatrix, config: &AdmmConfig) -> Result<AdmmSolution> {
    admm_solve_observed(y, mask, w, config, |_| {})
}

/// [`admm_solve`] with a callback invoked after every iteration.
pub fn admm_solve_observed<F>(
    y: &DenseMatrix,
    mask: &Mask,
    w: &DenseMatrix,
    config: &AdmmConfig,
    mut observer: F,
) -> Result<AdmmSolution>
where
    F: FnMut(&AdmmIterate<'_>),
{
    config.validate()?;
    // validates shapes and finiteness of the observed data
    observed_cells(y, mask, w)?;
    let (n1, n2) = mask.shape();
    let n = n1 + n2;
    let data_scale = 2.0 / (n1 * n2) as f64;
    let AdmmConfig { rho, tau, mu, beta, .. } = *config;
    let shift = DenseMatrix::identity(n, n) * mu;
    let residual_stop = 1e-6 * n as f64;

    let mut state = AdmmState::zeros(n);
    let mut converged = false;
    let mut iterations = 0;

    for t in 1..=config.max_iter {
        iterations = t;
        let dual = (&state.v + &shift) / rho;
        let x_arg = if config.paper_signs { &state.z + dual } else { &state.z - dual };
        state.x = psd_project(&x_arg)?;
        let z_arg = &state.x + &state.v / rho;
        let z_next = phi_project_scaled(&z_arg, mask, y, w, beta, rho, data_scale)?;
        state.dual_residual = rho * (&z_next - &state.z).norm();
        state.z = z_next;
        let gap = &state.x - &state.z;
        state.v += gap.clone() * (tau * rho);
        state.primal_residual = gap.norm();

        let a = state.z12(n1, n2);
        let obj = hybrid_objective(&a, y, mask, w, mu)?;
        if !obj.is_finite() || !state.primal_residual.is_finite() || state.v.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure {
                iteration: t,
                message: "ADMM iterate became non-finite".into(),
            });
        }
        let prev = state.objective_trace.last().copied();
        state.objective_trace.push(obj);
        observer(&AdmmIterate {
            iteration: t,
            x: &state.x,
            z: &state.z,
            v: &state.v,
            objective: obj,
            primal_residual: state.primal_residual,
        });
        if t >= 10 {
            let small_change = prev.is_some_and(|p| (obj - p).abs() < config.tol * obj.abs().max(1e-12));
            // a small primal residual alone does not certify optimality
            let feasible = state.primal_residual < residual_stop && state.dual_residual < residual_stop;
            if small_change || feasible {
                converged = true;
                break;
            }
        }
    }

    Ok(AdmmSolution {
        a_hat: state.z12(n1, n2),
        state,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn objective_examples() {
        let y = DenseMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let t = Mask::full(2, 2);
        let w = DenseMatrix::from_element(2, 2, 1.0);
        assert_eq!(hybrid_objective(&y, &y, &t, &w, 0.0).unwrap(), 0.0);
        let zero = DenseMatrix::zeros(2, 2);
        assert_abs_diff_eq!(hybrid_objective(&zero, &y, &t, &w, 0.0).unwrap(), 30.0 / 4.0, epsilon = 1e-14);
        assert!(hybrid_objective(&DenseMatrix::zeros(3, 2), &y, &t, &w, 0.0).is_err());
    }

    #[test]
    fn phi_examples() {
        // n1 = n2 = 1: lifted matrix is 2×2 with the 12-entry at (0, 1)
        let y = DenseMatrix::from_element(1, 1, 2.0);
        let w = DenseMatrix::from_element(1, 1, 1.0);
        let observed = Mask::full(1, 1);
        let c = DenseMatrix::from_row_slice(2, 2, &[-0.3, 0.0, 0.0, 0.5]);
        let out = phi_project(&c, &observed, &y, &w, 10.0, 0.1).unwrap();
        assert_abs_diff_eq!(out[(0, 1)], 2.0 / 1.1, epsilon = 1e-14);
        assert_eq!(out[(1, 0)], out[(0, 1)]);
        assert_eq!(out[(0, 0)], 0.0);
        assert_eq!(out[(1, 1)], 0.5);

        // unobserved 12-entry at 2β clamps to β
        let t = Mask::from_indices(1, 2, &[(0, 0)]).unwrap();
        let y = DenseMatrix::zeros(1, 2);
        let w = DenseMatrix::from_element(1, 2, 1.0);
        let mut c = DenseMatrix::zeros(3, 3);
        c[(0, 2)] = 6.0;
        c[(2, 0)] = 6.0;
        let out = phi_project(&c, &t, &y, &w, 3.0, 0.1).unwrap();
        assert_eq!(out[(0, 2)], 3.0);
        assert_eq!(out[(2, 0)], 3.0);
    }

    #[test]
    fn config_validation() {
        let mut c = AdmmConfig::new(1.0, 0.1);
        assert!(c.validate().is_ok());
        c.tau = 1.7;
        assert!(c.validate().is_err());
        c.tau = 1.618;
        c.rho = 0.0;
        assert!(c.validate().is_err());
    }
}
