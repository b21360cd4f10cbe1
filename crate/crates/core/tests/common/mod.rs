//! Oracles shared by the integration tests.

#![allow(dead_code)]

use balanced_mc::{DenseMatrix, Mask};

/// Largest singular value of a matrix with at most two rows, from the
/// closed-form top eigenvalue of `X Xᵀ`.
pub fn sigma_two_rows(x: &[[f64; 3]], rows: usize, cols: usize) -> f64 {
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for k in 0..cols {
        a += x[0][k] * x[0][k];
        if rows == 2 {
            b += x[0][k] * x[1][k];
            c += x[1][k] * x[1][k];
        }
    }
    let half = 0.5 * (a - c);
    (0.5 * (a + c) + (half * half + b * b).sqrt()).max(0.0).sqrt()
}

/// Exhaustive minimum of `‖T∘W − J‖ + κ′‖T∘W‖²_F` over observed weights on the
/// grid `1, 1 + step, …, hi`, for masks of at most 2×3 with at most three
/// observed cells. Returns one minimum per κ′.
pub fn weight_grid_oracle(mask: &Mask, kappas: &[f64], step: f64, hi: f64) -> Vec<f64> {
    let (rows, cols) = mask.shape();
    assert!(rows <= 2 && cols <= 3, "oracle handles at most 2x3");
    let cells = mask.observed().to_vec();
    assert!(cells.len() <= 3, "oracle handles at most three free weights");
    let points = ((hi - 1.0) / step).round() as usize + 1;
    let value = |k: usize| 1.0 + step * k as f64;
    let mut best = vec![f64::INFINITY; kappas.len()];
    let mut x = [[-1.0f64; 3]; 2];
    let mut idx = vec![0usize; cells.len()];
    loop {
        let mut sq = 0.0;
        for (c, &(i, j)) in cells.iter().enumerate() {
            let w = value(idx[c]);
            x[i][j] = w - 1.0;
            sq += w * w;
        }
        let sigma = sigma_two_rows(&x, rows, cols);
        for (b, &k) in best.iter_mut().zip(kappas) {
            *b = b.min(sigma + k * sq);
        }
        // odometer over the free weights
        let mut pos = 0;
        loop {
            if pos == idx.len() {
                return best;
            }
            idx[pos] += 1;
            if idx[pos] < points {
                break;
            }
            idx[pos] = 0;
            pos += 1;
        }
    }
}

/// `Σ C_ij B_ij²`, the inner product `⟨C∘B, B⟩`, by scalar loop.
pub fn weighted_square_sum(c: &DenseMatrix, b: &DenseMatrix) -> f64 {
    let mut acc = 0.0;
    for i in 0..c.nrows() {
        for j in 0..c.ncols() {
            acc += c[(i, j)] * b[(i, j)] * b[(i, j)];
        }
    }
    acc
}

/// Largest Euclidean row norm, by scalar loop.
pub fn row_norm_max(m: &DenseMatrix) -> f64 {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * m[(i, j)]).sum::<f64>().sqrt())
        .fold(0.0, f64::max)
}
