//! Dense linear-algebra primitives shared by the weight estimator and both
//! completion solvers.
//!
//! Matrices are plain `nalgebra::DMatrix<f64>` values. Every public entry
//! point rejects non-finite input, so downstream code can assume finiteness.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type DenseMatrix = DMatrix<f64>;

/// Below this minimum dimension the top singular triplet comes from a full SVD.
pub const FULL_SVD_MAX_DIM: usize = 64;

/// Default relative threshold used by [`estimate_rank`].
pub const DEFAULT_RANK_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingularTriplet {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// A matrix-free operator, enough to drive power iteration.
pub trait LinearOperator {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// `y = M x`
    fn apply(&self, x: &[f64], y: &mut [f64]);
    /// `x = Mᵀ y`
    fn apply_transpose(&self, y: &[f64], x: &mut [f64]);
}

impl LinearOperator for DenseMatrix {
    fn nrows(&self) -> usize {
        self.nrows()
    }

    fn ncols(&self) -> usize {
        self.ncols()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for (j, col) in self.column_iter().enumerate() {
            let xj = x[j];
            if xj == 0.0 {
                continue;
            }
            for (yi, &a) in y.iter_mut().zip(col.iter()) {
                *yi += a * xj;
            }
        }
    }

    fn apply_transpose(&self, y: &[f64], x: &mut [f64]) {
        for (j, col) in self.column_iter().enumerate() {
            x[j] = col.iter().zip(y).map(|(a, b)| a * b).sum();
        }
    }
}

pub fn ensure_finite(m: &DenseMatrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} contains non-finite entries")))
    }
}

pub fn ensure_same_shape(what: &'static str, expected: &DenseMatrix, got: &DenseMatrix) -> Result<()> {
    if expected.shape() == got.shape() {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            what,
            expected: expected.shape(),
            got: got.shape(),
        })
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn unit(len: usize) -> Vec<f64> {
    let mut e = vec![0.0; len];
    if len > 0 {
        e[0] = 1.0;
    }
    e
}

/// Singular values in descending order.
pub fn singular_values(m: &DenseMatrix) -> Result<Vec<f64>> {
    ensure_finite(m, "matrix")?;
    if m.is_empty() {
        return Ok(Vec::new());
    }
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

pub fn spectral_norm(m: &DenseMatrix) -> Result<f64> {
    Ok(singular_values(m)?.first().copied().unwrap_or(0.0))
}

pub fn nuclear_norm(m: &DenseMatrix) -> Result<f64> {
    Ok(singular_values(m)?.iter().sum())
}

/// Maximum row ℓ2 norm, ‖M‖_{2,∞}.
pub fn max_row_norm(m: &DenseMatrix) -> f64 {
    m.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

/// Number of singular values strictly above `rel_tol · σ₁`.
pub fn estimate_rank(m: &DenseMatrix, rel_tol: f64) -> Result<usize> {
    if !(rel_tol > 0.0 && rel_tol < 1.0) {
        return Err(Error::invalid(format!("rel_tol must lie in (0,1), got {rel_tol}")));
    }
    let s = singular_values(m)?;
    let top = s.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Ok(0);
    }
    Ok(s.iter().filter(|&&x| x > rel_tol * top).count())
}

/// Thin SVD with singular values sorted descending: `(U, σ, V)` with `M = U diag(σ) Vᵀ`.
pub fn sorted_svd(m: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    ensure_finite(m, "matrix")?;
    let svd = SVD::new(m.clone(), true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let k = order.len();
    let mut us = DenseMatrix::zeros(m.nrows(), k);
    let mut vs = DenseMatrix::zeros(m.ncols(), k);
    let mut s = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        us.set_column(dst, &u.column(src));
        vs.set_column(dst, &v_t.row(src).transpose());
        s.push(svd.singular_values[src]);
    }
    Ok((us, s, vs))
}

/// Leading `r` singular triplets as `(U_r, σ_r, V_r)`.
pub fn truncated_svd(m: &DenseMatrix, r: usize) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix)> {
    let (u, s, v) = sorted_svd(m)?;
    let r = r.min(s.len());
    Ok((
        u.columns(0, r).into_owned(),
        s[..r].to_vec(),
        v.columns(0, r).into_owned(),
    ))
}

/// Singular-value soft thresholding `U · max(Σ − θ, 0) · Vᵀ`.
pub fn svt(m: &DenseMatrix, threshold: f64) -> Result<DenseMatrix> {
    if !(threshold >= 0.0) {
        return Err(Error::invalid(format!("threshold must be nonnegative, got {threshold}")));
    }
    if threshold == 0.0 {
        ensure_finite(m, "matrix")?;
        return Ok(m.clone());
    }
    let (u, s, v) = sorted_svd(m)?;
    let mut scaled = u;
    for (k, sk) in s.iter().enumerate() {
        let shrunk = (sk - threshold).max(0.0);
        scaled.column_mut(k).scale_mut(shrunk);
    }
    Ok(scaled * v.transpose())
}

/// Largest singular value and its vectors, with `uᵀ M v = σ ≥ 0`.
///
/// Uses a full SVD when `min(rows, cols) ≤ 64` and seeded power iteration on
/// `MᵀM` otherwise. A zero matrix yields `σ = 0` with first basis vectors.
pub fn top_singular_triplet(m: &DenseMatrix, tol: f64, max_iter: usize) -> Result<SingularTriplet> {
    ensure_finite(m, "matrix")?;
    if !(tol > 0.0) {
        return Err(Error::invalid(format!("tol must be positive, got {tol}")));
    }
    if m.is_empty() {
        return Err(Error::invalid("empty matrix"));
    }
    if m.iter().all(|&x| x == 0.0) {
        return Ok(SingularTriplet {
            sigma: 0.0,
            u: unit(m.nrows()),
            v: unit(m.ncols()),
        });
    }
    if m.nrows().min(m.ncols()) <= FULL_SVD_MAX_DIM {
        let (u, s, v) = sorted_svd(m)?;
        return Ok(SingularTriplet {
            sigma: s[0],
            u: u.column(0).iter().copied().collect(),
            v: v.column(0).iter().copied().collect(),
        });
    }
    power_iteration(m, None, tol, max_iter)
}

/// Deterministic pseudo-random unit start vector of length `n`.
pub fn seeded_start(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37_79b9_7f4a_7c15 ^ n as u64);
    let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let nv = norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);
    v
}

/// Power iteration on `MᵀM` for any [`LinearOperator`].
///
/// `start` seeds the right vector (warm start); otherwise a seeded random
/// vector is used. Stops when the extrapolated remaining error of σ,
/// `Δₖ q/(1 − q)` with `q = Δₖ/Δₖ₋₁` the observed contraction of successive
/// changes, drops below `tol · σ`. A bare `Δₖ ≤ tol · σ` test stops far too
/// early when the two top singular values are close.
pub fn power_iteration<Op: LinearOperator + ?Sized>(
    op: &Op,
    start: Option<&[f64]>,
    tol: f64,
    max_iter: usize,
) -> Result<SingularTriplet> {
    let (rows, cols) = (op.nrows(), op.ncols());
    let mut v = match start {
        Some(s) if s.len() == cols && norm(s) > 0.0 => {
            let ns = norm(s);
            s.iter().map(|x| x / ns).collect()
        }
        _ => seeded_start(cols),
    };
    let mut mv = vec![0.0; rows];
    let mut mtu = vec![0.0; cols];
    let mut sigma_prev = f64::NAN;
    let mut delta_prev = f64::NAN;

    let finish = |v: Vec<f64>, mv: &mut Vec<f64>| -> SingularTriplet {
        op.apply(&v, mv);
        let sigma = norm(mv);
        if sigma == 0.0 {
            return SingularTriplet {
                sigma: 0.0,
                u: unit(rows),
                v: unit(cols),
            };
        }
        let u = mv.iter().map(|x| x / sigma).collect();
        SingularTriplet { sigma, u, v }
    };

    for _ in 0..max_iter.max(1) {
        op.apply(&v, &mut mv);
        let s1 = norm(&mv);
        if s1 == 0.0 {
            return Ok(SingularTriplet {
                sigma: 0.0,
                u: unit(rows),
                v: unit(cols),
            });
        }
        mv.iter_mut().for_each(|x| *x /= s1);
        op.apply_transpose(&mv, &mut mtu);
        let sigma = norm(&mtu);
        if !sigma.is_finite() {
            return Err(Error::NumericalFailure {
                iteration: 0,
                message: "power iteration produced a non-finite value".into(),
            });
        }
        for (vi, &x) in v.iter_mut().zip(&mtu) {
            *vi = x / sigma;
        }
        let delta = (sigma - sigma_prev).abs();
        let remaining = if delta == 0.0 {
            0.0
        } else {
            let q = (delta / delta_prev).min(0.999);
            delta * q / (1.0 - q)
        };
        if delta <= tol * sigma && remaining <= tol * sigma {
            return Ok(finish(v, &mut mv));
        }
        sigma_prev = sigma;
        delta_prev = delta;
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        best: Box::new(finish(v, &mut mv)),
    })
}

/// Frobenius-nearest PSD matrix: `V · max(Λ, 0) · Vᵀ` of the symmetrized input.
pub fn psd_project(s: &DenseMatrix) -> Result<DenseMatrix> {
    if !s.is_square() {
        return Err(Error::invalid(format!(
            "psd_project needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    ensure_finite(s, "matrix")?;
    let sym = (s + s.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut factor = eig.eigenvectors;
    let mut kept = 0;
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        let scale = if lambda > 0.0 {
            kept += 1;
            lambda.sqrt()
        } else {
            0.0
        };
        factor.column_mut(k).scale_mut(scale);
    }
    let n = s.nrows();
    if kept == 0 {
        return Ok(DenseMatrix::zeros(n, n));
    }
    let out = &factor * factor.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Euclidean projection onto `{M : ‖M‖_{2,∞} ≤ bound}`; rows inside the ball
/// are returned untouched.
pub fn row_norm_project(m: &DenseMatrix, bound: f64) -> Result<DenseMatrix> {
    if !(bound > 0.0) {
        return Err(Error::invalid(format!("row-norm bound must be positive, got {bound}")));
    }
    ensure_finite(m, "matrix")?;
    let mut out = m.clone();
    row_norm_project_mut(&mut out, bound);
    Ok(out)
}

pub(crate) fn row_norm_project_mut(m: &mut DenseMatrix, bound: f64) {
    for i in 0..m.nrows() {
        let n = m.row(i).norm();
        if n > bound {
            m.row_mut(i).scale_mut(bound / n);
        }
    }
}

/// Frobenius inner product.
pub fn frob_inner(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

pub fn to_dvector(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn top_triplet_of_diagonal() {
        let m = DenseMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 4.0]));
        let t = top_singular_triplet(&m, 1e-12, 100).unwrap();
        assert_abs_diff_eq!(t.sigma, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.u[1].abs(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.v[1].abs(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(t.u[1] * 4.0 * t.v[1], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn top_triplet_of_ones() {
        let m = DenseMatrix::from_element(2, 2, 1.0);
        let t = top_singular_triplet(&m, 1e-12, 100).unwrap();
        assert_abs_diff_eq!(t.sigma, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn top_triplet_matches_full_svd() {
        let m = random(7, 5, 11);
        let t = top_singular_triplet(&m, 1e-12, 1000).unwrap();
        let s = m.clone().svd(false, false).singular_values.max();
        assert_abs_diff_eq!(t.sigma, s, epsilon = 1e-8);
    }

    #[test]
    fn power_path_matches_full_svd() {
        let m = random(120, 90, 3);
        let tol = 1e-12;
        let t = top_singular_triplet(&m, tol, 100_000).unwrap();
        let s = spectral_norm(&m).unwrap();
        assert!((t.sigma - s).abs() <= 1e-6 * s, "{} vs {}", t.sigma, s);
        let u = to_dvector(&t.u);
        let v = to_dvector(&t.v);
        assert_abs_diff_eq!(u.norm(), 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!(v.norm(), 1.0, epsilon = 1e-10);
        assert_abs_diff_eq!((u.transpose() * &m * &v)[0], t.sigma, epsilon = 1e-8);
    }

    #[test]
    fn zero_matrix_triplet_convention() {
        let t = top_singular_triplet(&DenseMatrix::zeros(3, 2), 1e-8, 10).unwrap();
        assert_eq!(t.sigma, 0.0);
        assert_eq!(t.u, vec![1.0, 0.0, 0.0]);
        assert_eq!(t.v, vec![1.0, 0.0]);
        let big = DenseMatrix::zeros(70, 70);
        assert_eq!(top_singular_triplet(&big, 1e-8, 10).unwrap().sigma, 0.0);
    }

    #[test]
    fn non_finite_rejected() {
        let mut m = DenseMatrix::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(top_singular_triplet(&m, 1e-8, 10), Err(Error::InvalidInput(_))));
        assert!(matches!(nuclear_norm(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn power_iteration_reports_best_iterate() {
        let m = random(80, 80, 5);
        match top_singular_triplet(&m, 1e-15, 2) {
            Err(Error::NotConverged { iterations, best }) => {
                assert_eq!(iterations, 2);
                assert!(best.sigma > 0.0);
            }
            other => panic!("expected NotConverged, got {other:?}"),
        }
    }

    #[test]
    fn psd_projection_examples() {
        let s = DenseMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0]));
        let p = psd_project(&s).unwrap();
        let want = DenseMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.0]));
        assert!((p - want).norm() < 1e-12);

        let b = random(4, 4, 1);
        let psd = &b * b.transpose();
        assert!((psd_project(&psd).unwrap() - &psd).norm() < 1e-10);

        assert!(psd_project(&DenseMatrix::zeros(2, 3)).is_err());
    }

    /// Brute-force oracle: minimize ‖S − LLᵀ‖_F over lower-triangular L on a
    /// coarse grid, then refine the grid around the incumbent down to 1e-2.
    #[test]
    fn psd_projection_matches_cholesky_grid_oracle() {
        let b = random(3, 3, 17);
        let s = (&b + b.transpose()) * 0.5;
        let p = psd_project(&s).unwrap();
        let best_proj = (&s - &p).norm();

        let eval = |l: &[f64; 6]| {
            let lm = DenseMatrix::from_row_slice(3, 3, &[l[0], 0.0, 0.0, l[1], l[2], 0.0, l[3], l[4], l[5]]);
            (&s - &lm * lm.transpose()).norm()
        };
        let mut center = [0.0f64; 6];
        let mut best = f64::INFINITY;
        let mut radius: f64 = 2.0;
        for &step in &[0.5, 0.1, 0.02, 0.01] {
            let k = (radius / step).round() as i64;
            let mut incumbent = center;
            let offsets: Vec<f64> = (-k..=k).map(|i| i as f64 * step).collect();
            // coordinate-wise sweeps keep the oracle tractable at 6 dims
            for _sweep in 0..6 {
                for d in 0..6 {
                    for &o in &offsets {
                        let mut cand = incumbent;
                        cand[d] = center[d] + o;
                        let f = eval(&cand);
                        if f < best {
                            best = f;
                            incumbent = cand;
                        }
                    }
                }
                center = incumbent;
            }
            radius = step * 4.0;
        }
        // the projection is the global optimum; the grid optimum sits within grid resolution
        assert!(best_proj <= best + 1e-12, "projection {best_proj} worse than grid {best}");
        assert!(best - best_proj < 0.05, "grid oracle {best} far from projection {best_proj}");
    }

    #[test]
    fn nuclear_norm_examples() {
        let d = DenseMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 4.0]));
        assert_abs_diff_eq!(nuclear_norm(&d).unwrap(), 7.0, epsilon = 1e-12);

        let u = random(5, 1, 2).normalize();
        let v = random(4, 1, 3).normalize();
        assert_abs_diff_eq!(nuclear_norm(&(u * v.transpose())).unwrap(), 1.0, epsilon = 1e-12);

        // trace of sqrt(MᵀM) via symmetric eigendecomposition
        let m = random(5, 5, 8);
        let eig = SymmetricEigen::new(m.transpose() * &m);
        let tr: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
        assert_abs_diff_eq!(nuclear_norm(&m).unwrap(), tr, epsilon = 1e-8);
    }

    #[test]
    fn rank_examples() {
        let d = DenseMatrix::from_diagonal(&DVector::from_vec(vec![5.0, 3.0, 0.0]));
        assert_eq!(estimate_rank(&d, 1e-4).unwrap(), 2);
        assert_eq!(estimate_rank(&DenseMatrix::zeros(4, 3), 1e-4).unwrap(), 0);
        let m = random(20, 5, 1) * random(20, 5, 2).transpose();
        assert_eq!(estimate_rank(&m, 1e-6).unwrap(), 5);
        assert!(estimate_rank(&m, 0.0).is_err());
    }

    #[test]
    fn svt_examples() {
        let m = random(4, 4, 9);
        assert_eq!(svt(&m, 0.0).unwrap(), m);

        let d = DenseMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0]));
        let out = svt(&d, 2.0).unwrap();
        let want = DenseMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!((out - want).norm() < 1e-12);

        let s = singular_values(&m).unwrap();
        let out = svt(&m, s[1]).unwrap();
        assert!(estimate_rank(&out, 1e-8).unwrap() <= 1);
    }

    #[test]
    fn row_projection_examples() {
        let m = DenseMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        assert_eq!(row_norm_project(&m, 10.0).unwrap(), m);
        let p = row_norm_project(&m, 1.0).unwrap();
        assert_abs_diff_eq!(p[(0, 0)], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(p[(0, 1)], 0.8, epsilon = 1e-15);

        let m = random(6, 3, 4) * 0.4;
        let p = row_norm_project(&m, 0.5).unwrap();
        for i in 0..6 {
            assert!(p.row(i).norm() <= 0.5 + 1e-12);
            if m.row(i).norm() <= 0.5 {
                assert_eq!(p.row(i), m.row(i));
            }
        }
        assert!(row_norm_project(&m, 0.0).is_err());
    }
}
