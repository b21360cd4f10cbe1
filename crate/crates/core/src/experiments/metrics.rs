//! Error metrics for synthetic truth and held-out ratings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_same_shape, estimate_rank, DenseMatrix};
use crate::mask::Mask;

use super::tuning::ChosenParams;

/// One `(row, col, value)` rating, zero-indexed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

impl Rating {
    pub fn new(row: usize, col: usize, value: f64) -> Self {
        Rating { row, col, value }
    }
}

/// Metrics of one fit; absent metrics are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rmse: Option<f64>,
    pub te: Option<f64>,
    pub trmse: Option<f64>,
    pub tmae: Option<f64>,
    pub est_rank: usize,
    pub chosen: Option<ChosenParams>,
    pub replicate_seed: Option<u64>,
}

impl EvaluationReport {
    /// Computes whichever metrics the supplied references allow: `truth` with
    /// its observation mask gives RMSE and TE, `eval` gives TRMSE and TMAE.
    pub fn compute(
        a_hat: &DenseMatrix,
        truth: Option<(&DenseMatrix, &Mask)>,
        eval: Option<&[Rating]>,
        rank_tol: f64,
    ) -> Result<Self> {
        let (rmse_v, te) = match truth {
            Some((a_star, mask)) => {
                let te = if mask.is_full() { None } else { Some(test_error(a_hat, a_star, mask)?) };
                (Some(rmse(a_hat, a_star)?), te)
            }
            None => (None, None),
        };
        let (trmse, tmae) = match eval {
            Some(r) => {
                let (a, b) = trmse_tmae(a_hat, r)?;
                (Some(a), Some(b))
            }
            None => (None, None),
        };
        Ok(EvaluationReport {
            rmse: rmse_v,
            te,
            trmse,
            tmae,
            est_rank: estimate_rank(a_hat, rank_tol)?,
            chosen: None,
            replicate_seed: None,
        })
    }
}

/// `‖Â − A★‖_F / √(n₁n₂)`.
pub fn rmse(a_hat: &DenseMatrix, a_star: &DenseMatrix) -> Result<f64> {
    ensure_same_shape("A_hat", a_star, a_hat)?;
    Ok((a_hat - a_star).norm() / (a_hat.len() as f64).sqrt())
}

/// RMSE over the unobserved entries only.
pub fn test_error(a_hat: &DenseMatrix, a_star: &DenseMatrix, mask: &Mask) -> Result<f64> {
    ensure_same_shape("A_hat", a_star, a_hat)?;
    mask.check_conformable("A_star", a_star)?;
    if mask.is_full() {
        return Err(Error::invalid("test error needs at least one unobserved entry"));
    }
    let mut acc = 0.0;
    for ((a, s), t) in a_hat.iter().zip(a_star.iter()).zip(mask.as_matrix().iter()) {
        if *t == 0.0 {
            acc += (a - s).powi(2);
        }
    }
    Ok((acc / (a_hat.len() - mask.count()) as f64).sqrt())
}

/// `(TRMSE, TMAE)` of `Â` against held-out ratings.
pub fn trmse_tmae(a_hat: &DenseMatrix, ratings: &[Rating]) -> Result<(f64, f64)> {
    if ratings.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let (mut sq, mut abs) = (0.0, 0.0);
    for r in ratings {
        if r.row >= a_hat.nrows() || r.col >= a_hat.ncols() {
            return Err(Error::invalid(format!(
                "rating ({},{}) outside {}x{}",
                r.row,
                r.col,
                a_hat.nrows(),
                a_hat.ncols()
            )));
        }
        let e = a_hat[(r.row, r.col)] - r.value;
        sq += e * e;
        abs += e.abs();
    }
    let n = ratings.len() as f64;
    Ok(((sq / n).sqrt(), abs / n))
}

/// `√(2 Σ 1/π_ij)`.
pub fn kappa_oracle(pi: &DenseMatrix) -> Result<f64> {
    let mut acc = 0.0;
    for &p in pi.iter() {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::invalid(format!("probability {p} outside (0, 1]")));
        }
        acc += 1.0 / p;
    }
    Ok((2.0 * acc).sqrt())
}
