//! Model-free balancing weights.
//!
//! The weights minimize the spectral norm of `T∘W − J` with a Frobenius
//! penalty on `T∘W`, subject to `W ≥ 1` on observed cells:
//!
//! ```text
//! g(W) = ‖T∘W − J‖ + κ′ ‖T∘W‖²_F
//! ```
//!
//! It is solved by projected subgradient descent. The subgradient of the
//! spectral term at `X = T∘W − J` is `u₁v₁ᵀ ∘ T`, which only needs the top
//! singular triplet of `X`; for large masks that triplet comes from a
//! warm-started power iteration on a sparse-minus-ones operator, so a step
//! costs `O(N + n₁ + n₂)` per matrix-vector product.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    self, power_iteration, top_singular_triplet, DenseMatrix, LinearOperator, SingularTriplet,
    FULL_SVD_MAX_DIM,
};
use crate::mask::Mask;

/// Step size schedule for the projected subgradient method.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepRule {
    /// `α_k = step0 · √(n₁n₂) / √k`. The `√(n₁n₂)` factor compensates for the
    /// `1/√(n₁n₂)` entry scale of `u₁v₁ᵀ`, so `step0` means "per-entry change".
    InvSqrt { step0: f64 },
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::InvSqrt { step0: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightOptions {
    pub max_iter: usize,
    pub step_rule: StepRule,
    /// Relative improvement of the best objective over `window` iterations below
    /// which the solver stops.
    pub tol: f64,
    pub window: usize,
    /// Relative tolerance for the inner power iteration (large masks only).
    pub power_tol: f64,
    pub power_max_iter: usize,
}

impl Default for WeightOptions {
    fn default() -> Self {
        WeightOptions {
            max_iter: 2000,
            step_rule: StepRule::default(),
            tol: 1e-4,
            window: 20,
            power_tol: 1e-6,
            power_max_iter: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSolution {
    /// `W`; entries at unobserved positions are 0 and never read.
    #[serde(skip)]
    pub weights: DenseMatrix,
    pub kappa_prime: f64,
    /// `‖T∘W − J‖` at the returned weights.
    pub h_value: f64,
    /// `‖T∘W‖_F`, the achieved constraint radius.
    pub frob_tw: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub kappa_prime: f64,
    pub h_value: f64,
    pub frob_tw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancingProfile {
    pub points: Vec<ProfilePoint>,
    pub h_max: f64,
    pub h_min: f64,
}

impl BalancingProfile {
    pub fn from_points(points: Vec<ProfilePoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("balancing profile needs at least one point"));
        }
        if points.windows(2).any(|w| w[0].kappa_prime > w[1].kappa_prime) {
            return Err(Error::invalid("profile points must be sorted by kappa_prime"));
        }
        let h_max = points.iter().map(|p| p.h_value).fold(f64::NEG_INFINITY, f64::max);
        let h_min = points.iter().map(|p| p.h_value).fold(f64::INFINITY, f64::min);
        Ok(BalancingProfile { points, h_max, h_min })
    }

    /// Balancing percentage `(M − h)/(M − m)` of each point; all ones when `M = m`.
    pub fn percentages(&self) -> Vec<f64> {
        let span = self.h_max - self.h_min;
        self.points
            .iter()
            .map(|p| if span > 0.0 { (self.h_max - p.h_value) / span } else { 1.0 })
            .collect()
    }
}

/// `X = T∘W − J` as a matrix-free operator over the observed cells.
struct ShiftedWeights<'a> {
    n1: usize,
    n2: usize,
    cells: &'a [(usize, usize)],
    w: &'a [f64],
}

impl LinearOperator for ShiftedWeights<'_> {
    fn nrows(&self) -> usize {
        self.n1
    }

    fn ncols(&self) -> usize {
        self.n2
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let sum: f64 = x.iter().sum();
        y.iter_mut().for_each(|v| *v = -sum);
        for (&(i, j), &w) in self.cells.iter().zip(self.w) {
            y[i] += w * x[j];
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        let sum: f64 = y.iter().sum();
        x.iter_mut().for_each(|v| *v = -sum);
        for (&(i, j), &w) in self.cells.iter().zip(self.w) {
            x[j] += w * y[i];
        }
    }
}

fn dense_shifted(n1: usize, n2: usize, cells: &[(usize, usize)], w: &[f64]) -> DenseMatrix {
    let mut x = DenseMatrix::from_element(n1, n2, -1.0);
    for (&(i, j), &wv) in cells.iter().zip(w) {
        x[(i, j)] += wv;
    }
    x
}

struct TripletOracle<'a> {
    mask: &'a Mask,
    opts: &'a WeightOptions,
    warm: Option<Vec<f64>>,
}

impl TripletOracle<'_> {
    fn small(&self) -> bool {
        self.mask.nrows().min(self.mask.ncols()) <= FULL_SVD_MAX_DIM
    }

    fn top(&mut self, w: &[f64], tol: f64) -> Result<SingularTriplet> {
        let (n1, n2) = self.mask.shape();
        let cells = self.mask.observed();
        if self.small() {
            return top_singular_triplet(&dense_shifted(n1, n2, cells, w), tol, self.opts.power_max_iter);
        }
        let op = ShiftedWeights { n1, n2, cells, w };
        let t = match power_iteration(&op, self.warm.as_deref(), tol, self.opts.power_max_iter) {
            Ok(t) => t,
            Err(Error::NotConverged { best, .. }) => *best,
            Err(e) => return Err(e),
        };
        self.warm = Some(t.v.clone());
        Ok(t)
    }
}

fn validate_opts(opts: &WeightOptions) -> Result<()> {
    let StepRule::InvSqrt { step0 } = opts.step_rule;
    if !(step0 > 0.0) || !(opts.tol >= 0.0) || opts.window == 0 || opts.max_iter == 0 {
        return Err(Error::invalid(format!("invalid weight options {opts:?}")));
    }
    Ok(())
}

/// Projected subgradient minimization of `‖T∘W − J‖ + κ′‖T∘W‖²_F` over `W ≥ 1`.
///
/// Starts from `W = J` and returns the best iterate seen. Running out of
/// iterations is reported through `converged = false`, not an error.
pub fn solve_weights(mask: &Mask, kappa_prime: f64, opts: &WeightOptions) -> Result<WeightSolution> {
    if !(kappa_prime >= 0.0) || !kappa_prime.is_finite() {
        return Err(Error::invalid(format!("kappa_prime must be finite and >= 0, got {kappa_prime}")));
    }
    validate_opts(opts)?;
    let (n1, n2) = mask.shape();
    let cells = mask.observed();
    let scale = ((n1 * n2) as f64).sqrt();
    let StepRule::InvSqrt { step0 } = opts.step_rule;

    let mut w = vec![1.0; cells.len()];
    let mut best_w = w.clone();
    let mut best_obj = f64::INFINITY;
    let mut best_hist: Vec<f64> = Vec::with_capacity(opts.max_iter);
    let mut oracle = TripletOracle { mask, opts, warm: None };
    let mut converged = false;
    let mut iterations = 0;
    let mut avg = w.clone();
    let mut epoch_weight = 0.0;

    for k in 1..=opts.max_iter {
        iterations = k;
        let t = oracle.top(&w, opts.power_tol)?;
        let sq: f64 = w.iter().map(|x| x * x).sum();
        let obj = t.sigma + kappa_prime * sq;
        if !obj.is_finite() {
            return Err(Error::NumericalFailure {
                iteration: k,
                message: "weight objective became non-finite".into(),
            });
        }
        if obj < best_obj {
            best_obj = obj;
            best_w.copy_from_slice(&w);
        }
        best_hist.push(best_obj);
        if k > opts.window {
            let before = best_hist[k - 1 - opts.window];
            if best_obj == 0.0 || before - best_obj < opts.tol * best_obj.abs() {
                converged = true;
                break;
            }
        }
        let alpha = step0 * scale / (k as f64).sqrt();
        for (idx, &(i, j)) in cells.iter().enumerate() {
            let g = t.u[i] * t.v[j] + 2.0 * kappa_prime * w[idx];
            w[idx] = (w[idx] - alpha * g).max(1.0);
        }

        // step-weighted average over the epoch [2^m, 2^(m+1)), scored at the epoch end
        epoch_weight += alpha;
        let mix = alpha / epoch_weight;
        for (a, &x) in avg.iter_mut().zip(&w) {
            *a += mix * (x - *a);
        }
        if (k + 1).is_power_of_two() {
            let ta = oracle.top(&avg, opts.power_tol)?;
            let obj_avg = ta.sigma + kappa_prime * avg.iter().map(|x| x * x).sum::<f64>();
            if obj_avg < best_obj {
                best_obj = obj_avg;
                best_w.copy_from_slice(&avg);
            }
            epoch_weight = 0.0;
        }
    }

    let final_t = oracle.top(&best_w, opts.power_tol.min(1e-10))?;
    let sq: f64 = best_w.iter().map(|x| x * x).sum();
    let mut weights = DenseMatrix::zeros(n1, n2);
    for (&(i, j), &wv) in cells.iter().zip(&best_w) {
        weights[(i, j)] = wv;
    }
    Ok(WeightSolution {
        weights,
        kappa_prime,
        h_value: final_t.sigma,
        frob_tw: sq.sqrt(),
        objective: final_t.sigma + kappa_prime * sq,
        iterations,
        converged,
    })
}

/// `g(W) = ‖T∘W − J‖ + κ′‖T∘W‖²_F`, evaluated exactly.
pub fn weight_objective(weights: &DenseMatrix, mask: &Mask, kappa_prime: f64) -> Result<f64> {
    let c = shifted_weights(weights, mask)?;
    let tw = mask.apply(weights);
    Ok(linalg::spectral_norm(&c)? + kappa_prime * tw.norm_squared())
}

/// `T∘W − J`.
pub fn shifted_weights(weights: &DenseMatrix, mask: &Mask) -> Result<DenseMatrix> {
    mask.check_conformable("weights", weights)?;
    linalg::ensure_finite(weights, "weights")?;
    Ok(mask.apply(weights).add_scalar(-1.0))
}

/// Eight log-spaced κ′ values spanning `[1e-6, 1e2] / (n₁n₂)`.
pub fn default_kappa_grid(n1: usize, n2: usize, points: usize) -> Vec<f64> {
    let nn = (n1 * n2) as f64;
    let (lo, hi) = (-6.0f64, 2.0f64);
    match points {
        0 => Vec::new(),
        1 => vec![10f64.powf(lo) / nn],
        p => (0..p)
            .map(|k| 10f64.powf(lo + (hi - lo) * k as f64 / (p - 1) as f64) / nn)
            .collect(),
    }
}

/// Replaces each solution by the candidate from `pool` with the smallest
/// objective at its own κ′, keeping its iteration count and convergence flag.
///
/// Choosing from one shared candidate set makes `h` non-decreasing and
/// `‖T∘W‖_F` non-increasing in κ′: for `κ_a < κ_b` the two optimality
/// inequalities add up to `(κ_a − κ_b)(F_a² − F_b²) ≤ 0`.
pub fn pool_solutions(solutions: &mut [WeightSolution], pool: &[WeightSolution]) {
    for s in solutions.iter_mut() {
        let k = s.kappa_prime;
        let score = |c: &WeightSolution| c.h_value + k * c.frob_tw * c.frob_tw;
        let mut best = score(s);
        let mut pick: Option<&WeightSolution> = None;
        for c in pool {
            let v = score(c);
            if v < best {
                best = v;
                pick = Some(c);
            }
        }
        if let Some(c) = pick {
            s.weights.clone_from(&c.weights);
            s.h_value = c.h_value;
            s.frob_tw = c.frob_tw;
            s.objective = best;
        }
    }
}

/// Solves the weights at every grid point, then pools the solutions (see
/// [`pool_solutions`]); returns the profile together with the solutions in
/// grid order.
pub fn balancing_profile_with_solutions(
    mask: &Mask,
    kappa_grid: &[f64],
    opts: &WeightOptions,
) -> Result<(BalancingProfile, Vec<WeightSolution>)> {
    if kappa_grid.is_empty() {
        return Err(Error::invalid("kappa grid is empty"));
    }
    if kappa_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::invalid("kappa grid must be sorted ascending"));
    }
    let mut solutions = kappa_grid
        .par_iter()
        .map(|&k| solve_weights(mask, k, opts))
        .collect::<Result<Vec<_>>>()?;
    let raw = solutions.clone();
    pool_solutions(&mut solutions, &raw);
    let points = solutions
        .iter()
        .map(|s| ProfilePoint {
            kappa_prime: s.kappa_prime,
            h_value: s.h_value,
            frob_tw: s.frob_tw,
        })
        .collect();
    Ok((BalancingProfile::from_points(points)?, solutions))
}

pub fn balancing_profile(mask: &Mask, kappa_grid: &[f64], opts: &WeightOptions) -> Result<BalancingProfile> {
    balancing_profile_with_solutions(mask, kappa_grid, opts).map(|(p, _)| p)
}

/// For each target percentage, the index of the grid point whose balancing
/// percentage is closest (ties toward smaller κ′).
pub fn select_indices_by_percentage(profile: &BalancingProfile, targets: &[f64]) -> Result<Vec<usize>> {
    if targets.is_empty() {
        return Err(Error::invalid("no balancing targets given"));
    }
    let pct = profile.percentages();
    Ok(targets
        .iter()
        .map(|&target| {
            let mut best = 0;
            for (k, p) in pct.iter().enumerate() {
                if (p - target).abs() < (pct[best] - target).abs() {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Maps each target balancing percentage to the κ′ that best achieves it.
pub fn select_by_percentage(profile: &BalancingProfile, targets: &[f64]) -> Result<Vec<(f64, f64)>> {
    let idx = select_indices_by_percentage(profile, targets)?;
    Ok(targets
        .iter()
        .zip(idx)
        .map(|(&t, k)| (t, profile.points[k].kappa_prime))
        .collect())
}

/// `S(W, Δ) = (n₁n₂)⁻¹ |⟨(T∘W − J)∘Δ, Δ⟩|`.
pub fn balancing_error(weights: &DenseMatrix, mask: &Mask, delta: &DenseMatrix) -> Result<f64> {
    mask.check_conformable("delta", delta)?;
    linalg::ensure_finite(delta, "delta")?;
    let c = shifted_weights(weights, mask)?;
    let inner: f64 = c.iter().zip(delta.iter()).map(|(c, d)| c * d * d).sum();
    Ok(inner.abs() / (mask.nrows() * mask.ncols()) as f64)
}

/// `(n₁n₂)^{-1/2} ‖T∘W − J‖ β′²`, which dominates `S(W, Δ)` whenever `‖Δ‖_max ≤ β′`.
pub fn relaxed_bound(weights: &DenseMatrix, mask: &Mask, beta_prime: f64) -> Result<f64> {
    if !(beta_prime > 0.0) {
        return Err(Error::invalid(format!("beta_prime must be positive, got {beta_prime}")));
    }
    let c = shifted_weights(weights, mask)?;
    let sigma = top_singular_triplet(&c, 1e-12, 10_000)?.sigma;
    Ok(sigma * beta_prime * beta_prime / ((mask.nrows() * mask.ncols()) as f64).sqrt())
}
