//! Factored solver for the weighted hybrid estimator.
//!
//! Parametrizes `A = LRᵀ` and minimizes
//!
//! ```text
//! f(L, R) = (n₁n₂)⁻¹ ‖T∘W^{1/2}∘(Y − LRᵀ)‖²_F + (μ/2)(‖L‖²_F + ‖R‖²_F)
//! ```
//!
//! subject to a row-norm bound on both factors, by alternating projected
//! gradient steps (first `L`, then `R`). With the default radius `√β` the
//! feasible set is the max-norm ball `‖LRᵀ‖_max ≤ β`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite, max_row_norm, row_norm_project_mut, truncated_svd, DenseMatrix};
use crate::mask::{observed_cells, Cell, Mask};

#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    pub l: DenseMatrix,
    pub r: DenseMatrix,
}

impl FactorPair {
    pub fn new(l: DenseMatrix, r: DenseMatrix) -> Result<Self> {
        if l.ncols() != r.ncols() || l.ncols() == 0 {
            return Err(Error::invalid(format!(
                "factor ranks differ or are zero: {} vs {}",
                l.ncols(),
                r.ncols()
            )));
        }
        ensure_finite(&l, "L")?;
        ensure_finite(&r, "R")?;
        Ok(FactorPair { l, r })
    }

    pub fn zeros(n1: usize, n2: usize, rank: usize) -> Self {
        FactorPair {
            l: DenseMatrix::zeros(n1, rank),
            r: DenseMatrix::zeros(n2, rank),
        }
    }

    pub fn rank(&self) -> usize {
        self.l.ncols()
    }

    pub fn product(&self) -> DenseMatrix {
        &self.l * self.r.transpose()
    }
}

/// Row-norm radius applied to both factors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Radius {
    /// `√β`: the feasible products are exactly the max-norm ball of radius β.
    SqrtBeta,
    /// `β` on each factor, which bounds `‖LRᵀ‖_max` by `β²`.
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StepSize {
    /// Per-row inverse Lipschitz constants of the current block, recomputed
    /// every half-step. Each half-step then cannot increase `f`.
    RowLipschitz,
    /// A single fixed step for every row, guarded against divergence.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PgdConfig {
    pub beta: f64,
    pub mu: f64,
    pub rank: usize,
    pub step: StepSize,
    pub max_iter: usize,
    pub tol: f64,
    pub radius: Radius,
    /// Extrapolate each block from its previous value before the gradient
    /// step, restarting whenever the objective increases.
    pub momentum: bool,
}

impl PgdConfig {
    pub fn new(beta: f64, mu: f64, rank: usize) -> Self {
        PgdConfig {
            beta,
            mu,
            rank,
            step: StepSize::RowLipschitz,
            max_iter: 5000,
            tol: 1e-6,
            radius: Radius::SqrtBeta,
            momentum: true,
        }
    }

    pub fn radius_value(&self) -> f64 {
        match self.radius {
            Radius::SqrtBeta => self.beta.sqrt(),
            Radius::Beta => self.beta,
        }
    }

    fn validate(&self, n1: usize, n2: usize) -> Result<()> {
        if !(self.beta > 0.0) || !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::invalid(format!("need beta > 0 and mu >= 0, got {self:?}")));
        }
        if self.rank == 0 || self.rank > n1.min(n2) {
            return Err(Error::invalid(format!(
                "rank {} outside 1..={}",
                self.rank,
                n1.min(n2)
            )));
        }
        if let StepSize::Fixed(s) = self.step {
            if !(s > 0.0) {
                return Err(Error::invalid(format!("step must be positive, got {s}")));
            }
        }
        if self.max_iter == 0 || !(self.tol >= 0.0) {
            return Err(Error::invalid("max_iter must be positive and tol nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PgdSolution {
    pub factors: FactorPair,
    pub a_hat: DenseMatrix,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Whether the row-norm projection ever changed an iterate. When false the
    /// run is identical for every larger radius.
    pub constrained: bool,
}

impl PgdSolution {
    pub fn objective(&self) -> f64 {
        self.objective_trace.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Row-major working copy of a factor pair.
#[derive(Clone)]
struct Rows {
    l: Vec<f64>,
    r: Vec<f64>,
    k: usize,
}

impl Rows {
    fn from_pair(p: &FactorPair) -> Self {
        let k = p.rank();
        let pack = |m: &DenseMatrix| {
            let mut out = Vec::with_capacity(m.nrows() * k);
            for i in 0..m.nrows() {
                out.extend(m.row(i).iter());
            }
            out
        };
        Rows { l: pack(&p.l), r: pack(&p.r), k }
    }

    fn to_pair(&self, n1: usize, n2: usize) -> FactorPair {
        FactorPair {
            l: DenseMatrix::from_row_slice(n1, self.k, &self.l),
            r: DenseMatrix::from_row_slice(n2, self.k, &self.r),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Problem {
    cells: Vec<Cell>,
    n1: usize,
    n2: usize,
    scale: f64,
}

impl Problem {
    fn new(y: &DenseMatrix, mask: &Mask, w: &DenseMatrix) -> Result<Self> {
        let (n1, n2) = mask.shape();
        Ok(Problem {
            cells: observed_cells(y, mask, w)?,
            n1,
            n2,
            scale: 2.0 / (n1 * n2) as f64,
        })
    }

    /// Weighted residuals `w (y − ⟨L_i, R_j⟩)` per cell, and the data-fit value.
    fn residuals(&self, f: &Rows, out: &mut [f64]) -> f64 {
        let k = f.k;
        let mut fit = 0.0;
        for (c, o) in self.cells.iter().zip(out.iter_mut()) {
            let r = c.y - dot(&f.l[c.i * k..(c.i + 1) * k], &f.r[c.j * k..(c.j + 1) * k]);
            fit += c.w * r * r;
            *o = c.w * r;
        }
        fit * self.scale / 2.0
    }

    fn objective(&self, f: &Rows, mu: f64, buf: &mut [f64]) -> f64 {
        let fit = self.residuals(f, buf);
        fit + 0.5 * mu * (f.l.iter().map(|x| x * x).sum::<f64>() + f.r.iter().map(|x| x * x).sum::<f64>())
    }

    /// Gradient of `f` with respect to L (`left = true`) or R, from weighted residuals.
    fn gradient(&self, f: &Rows, wres: &[f64], mu: f64, left: bool) -> Vec<f64> {
        let k = f.k;
        let (own, other) = if left { (&f.l, &f.r) } else { (&f.r, &f.l) };
        let mut g: Vec<f64> = own.iter().map(|x| mu * x).collect();
        for (c, &wr) in self.cells.iter().zip(wres) {
            let (a, b) = if left { (c.i, c.j) } else { (c.j, c.i) };
            let coef = -self.scale * wr;
            let src = &other[b * k..(b + 1) * k];
            for (gv, &s) in g[a * k..(a + 1) * k].iter_mut().zip(src) {
                *gv += coef * s;
            }
        }
        g
    }

    /// Per-row Lipschitz bounds `(2/(n₁n₂)) Σ_j W_ij ‖R_j‖² + μ` of the block gradient.
    fn row_lipschitz(&self, f: &Rows, mu: f64, left: bool) -> Vec<f64> {
        let k = f.k;
        let (rows, other) = if left { (self.n1, &f.r) } else { (self.n2, &f.l) };
        let other_sq: Vec<f64> = other.chunks(k).map(|r| dot(r, r)).collect();
        let mut lip = vec![0.0; rows];
        for c in &self.cells {
            let (a, b) = if left { (c.i, c.j) } else { (c.j, c.i) };
            lip[a] += c.w * other_sq[b];
        }
        lip.iter().map(|v| self.scale * v + mu).collect()
    }
}

/// Returns whether any row was rescaled.
fn project_rows(m: &mut [f64], k: usize, bound: f64) -> bool {
    let mut active = false;
    for row in m.chunks_mut(k) {
        let n = dot(row, row).sqrt();
        if n > bound {
            let s = bound / n;
            row.iter_mut().for_each(|x| *x *= s);
            active = true;
        }
    }
    active
}

/// `f(L, R)` evaluated exactly.
pub fn factored_objective(p: &FactorPair, y: &DenseMatrix, mask: &Mask, w: &DenseMatrix, mu: f64) -> Result<f64> {
    let prob = Problem::new(y, mask, w)?;
    check_factor_shapes(p, prob.n1, prob.n2)?;
    let rows = Rows::from_pair(p);
    let mut buf = vec![0.0; prob.cells.len()];
    Ok(prob.objective(&rows, mu, &mut buf))
}

/// Analytic gradients `(∂f/∂L, ∂f/∂R)`.
pub fn factored_gradient(
    p: &FactorPair,
    y: &DenseMatrix,
    mask: &Mask,
    w: &DenseMatrix,
    mu: f64,
) -> Result<(DenseMatrix, DenseMatrix)> {
    let prob = Problem::new(y, mask, w)?;
    check_factor_shapes(p, prob.n1, prob.n2)?;
    let rows = Rows::from_pair(p);
    let mut buf = vec![0.0; prob.cells.len()];
    prob.residuals(&rows, &mut buf);
    let gl = prob.gradient(&rows, &buf, mu, true);
    let gr = prob.gradient(&rows, &buf, mu, false);
    let k = p.rank();
    Ok((
        DenseMatrix::from_row_slice(prob.n1, k, &gl),
        DenseMatrix::from_row_slice(prob.n2, k, &gr),
    ))
}

fn check_factor_shapes(p: &FactorPair, n1: usize, n2: usize) -> Result<()> {
    if p.l.nrows() != n1 || p.r.nrows() != n2 || p.l.ncols() != p.r.ncols() {
        return Err(Error::ShapeMismatch {
            what: "factor pair",
            expected: (n1, n2),
            got: (p.l.nrows(), p.r.nrows()),
        });
    }
    Ok(())
}

/// Central finite differences of [`factored_objective`] on 20 seeded random
/// coordinates against the analytic gradient; returns the largest relative
/// deviation. Deviations are measured relative to
/// `max(|analytic|, |numeric|, 1e-3 · max|∇f|)` so near-zero partials do not
/// dominate.
pub fn gradient_check(
    p: &FactorPair,
    y: &DenseMatrix,
    mask: &Mask,
    w: &DenseMatrix,
    mu: f64,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::invalid(format!("eps must lie in (0, 1e-3], got {eps}")));
    }
    let (gl, gr) = factored_gradient(p, y, mask, w, mu)?;
    let g_scale = gl.amax().max(gr.amax());
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let left = rng.random::<bool>();
        let rows = if left { p.l.nrows() } else { p.r.nrows() };
        let (i, k) = (rng.random_range(0..rows), rng.random_range(0..p.rank()));
        let eval = |delta: f64| -> Result<f64> {
            let mut q = p.clone();
            if left {
                q.l[(i, k)] += delta;
            } else {
                q.r[(i, k)] += delta;
            }
            factored_objective(&q, y, mask, w, mu)
        };
        let numeric = (eval(eps)? - eval(-eps)?) / (2.0 * eps);
        let analytic = if left { gl[(i, k)] } else { gr[(i, k)] };
        let denom = analytic.abs().max(numeric.abs()).max(1e-3 * g_scale).max(f64::MIN_POSITIVE);
        worst = worst.max((numeric - analytic).abs() / denom);
    }
    Ok(worst)
}

/// Rank-`r` truncated SVD of `(n₁n₂/ΣW) · T∘W∘Y`, split evenly into factors
/// and projected into the row-norm ball.
pub fn spectral_init(y: &DenseMatrix, mask: &Mask, w: &DenseMatrix, rank: usize, radius: f64) -> Result<FactorPair> {
    let cells = observed_cells(y, mask, w)?;
    let (n1, n2) = mask.shape();
    let wsum: f64 = cells.iter().map(|c| c.w).sum();
    let mut m = DenseMatrix::zeros(n1, n2);
    if wsum > 0.0 {
        let s = (n1 * n2) as f64 / wsum;
        for c in &cells {
            m[(c.i, c.j)] = s * c.w * c.y;
        }
    }
    let (u, sv, v) = truncated_svd(&m, rank)?;
    let mut l = DenseMatrix::zeros(n1, rank);
    let mut r = DenseMatrix::zeros(n2, rank);
    for (k, s) in sv.iter().enumerate() {
        let root = s.sqrt();
        l.set_column(k, &(u.column(k) * root));
        r.set_column(k, &(v.column(k) * root));
    }
    row_norm_project_mut(&mut l, radius);
    row_norm_project_mut(&mut r, radius);
    FactorPair::new(l, r)
}

pub fn pgd_solve(y: &DenseMatrix, mask: &Mask, w: &DenseMatrix, config: &PgdConfig) -> Result<PgdSolution> {
    config.validate(mask.nrows(), mask.ncols())?;
    let init = spectral_init(y, mask, w, config.rank, f64::INFINITY)?;
    pgd_solve_from(y, mask, w, config, &init)
}

/// [`pgd_solve`] from a caller-provided starting point (projected first).
pub fn pgd_solve_from(
    y: &DenseMatrix,
    mask: &Mask,
    w: &DenseMatrix,
    config: &PgdConfig,
    init: &FactorPair,
) -> Result<PgdSolution> {
    let (n1, n2) = mask.shape();
    config.validate(n1, n2)?;
    check_factor_shapes(init, n1, n2)?;
    if init.rank() != config.rank {
        return Err(Error::invalid(format!(
            "initial factors have rank {}, config asks for {}",
            init.rank(),
            config.rank
        )));
    }
    let prob = Problem::new(y, mask, w)?;
    let radius = config.radius_value();
    let mu = config.mu;
    let k = config.rank;

    let mut cur = Rows::from_pair(init);
    let mut constrained = project_rows(&mut cur.l, k, radius);
    constrained |= project_rows(&mut cur.r, k, radius);
    let mut wres = vec![0.0; prob.cells.len()];
    let initial = prob.objective(&cur, mu, &mut wres);
    let mut best = cur.clone();
    let mut best_obj = initial;
    let mut trace = vec![initial];
    let mut prev = initial;
    let mut converged = false;
    let mut iterations = 0;
    let mut prev_l = cur.l.clone();
    let mut prev_r = cur.r.clone();
    let mut run = 0usize;

    for t in 1..=config.max_iter {
        iterations = t;
        let theta = if config.momentum { run as f64 / (run as f64 + 3.0) } else { 0.0 };
        for left in [true, false] {
            {
                let (own, before) = if left { (&mut cur.l, &mut prev_l) } else { (&mut cur.r, &mut prev_r) };
                for (x, p) in own.iter_mut().zip(before.iter_mut()) {
                    let next = *x + theta * (*x - *p);
                    *p = *x;
                    *x = next;
                }
            }
            if theta > 0.0 {
                prob.residuals(&cur, &mut wres);
            }
            let g = prob.gradient(&cur, &wres, mu, left);
            let steps: Vec<f64> = match config.step {
                StepSize::Fixed(s) => vec![s; if left { n1 } else { n2 }],
                StepSize::RowLipschitz => prob
                    .row_lipschitz(&cur, mu, left)
                    .into_iter()
                    .map(|lip| if lip > 0.0 { 1.0 / lip } else { 0.0 })
                    .collect(),
            };
            let own = if left { &mut cur.l } else { &mut cur.r };
            for ((row, grow), &s) in own.chunks_mut(k).zip(g.chunks(k)).zip(&steps) {
                for (x, gv) in row.iter_mut().zip(grow) {
                    *x -= s * gv;
                }
            }
            constrained |= project_rows(own, k, radius);
            if left {
                prob.residuals(&cur, &mut wres);
            }
        }
        let obj = prob.objective(&cur, mu, &mut wres);
        if !obj.is_finite() || obj > 1e6 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::NumericalFailure {
                iteration: t,
                message: format!("objective diverged ({obj:e}); use a smaller step"),
            });
        }
        trace.push(obj);
        if obj < best_obj {
            best_obj = obj;
            best.clone_from(&cur);
        }
        if (prev - obj).abs() <= config.tol * obj.abs().max(f64::MIN_POSITIVE) {
            converged = true;
            break;
        }
        // restart the extrapolation whenever it fails to decrease f
        run = if obj > prev { 0 } else { run + 1 };
        prev = obj;
    }

    let factors = best.to_pair(n1, n2);
    debug_assert!(max_row_norm(&factors.l) <= radius * (1.0 + 1e-12));
    Ok(PgdSolution {
        a_hat: factors.product(),
        factors,
        objective_trace: trace,
        iterations,
        converged,
        constrained,
    })
}
