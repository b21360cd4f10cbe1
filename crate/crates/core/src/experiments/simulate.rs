//! Synthetic low-rank instances with value-dependent missingness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::mask::Mask;

/// Missingness mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    /// π ≡ 0.25.
    Uniform,
    /// Large entries are more likely to be observed.
    HighObserved,
    /// Large entries are less likely to be observed.
    LowObserved,
}

impl Setting {
    pub fn from_index(k: u8) -> Result<Self> {
        match k {
            1 => Ok(Setting::Uniform),
            2 => Ok(Setting::HighObserved),
            3 => Ok(Setting::LowObserved),
            _ => Err(Error::invalid(format!("setting must be 1, 2 or 3, got {k}"))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Setting::Uniform => 1,
            Setting::HighObserved => 2,
            Setting::LowObserved => 3,
        }
    }
}

/// How the noise level is derived from the requested SNR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NoiseCalibration {
    /// From the expected per-entry signal power of Uniform[0,2] factors.
    #[default]
    Expected,
    /// From the realized `‖A★‖_F / √(n₁n₂)`.
    Realized,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticInstance {
    pub a_star: DenseMatrix,
    pub pi: DenseMatrix,
    /// `A★ + ε` on every entry; estimators only ever see `T∘Y`.
    pub y: DenseMatrix,
    pub mask: Mask,
    pub seed: u64,
    pub setting: Setting,
    pub snr: f64,
    pub sigma_eps: f64,
    pub rank: usize,
}

/// `E[A²ᵢⱼ] = r·E[u²]E[v²] + r(r−1)(E[u]E[v])²` for i.i.d. Uniform[0,2] factors.
pub fn expected_signal_power(rank: usize) -> f64 {
    let r = rank as f64;
    r * (4.0 / 3.0f64).powi(2) + r * (r - 1.0)
}

pub fn noise_sd(rank: usize, snr: f64) -> f64 {
    expected_signal_power(rank).sqrt() / snr
}

/// Type-7 (linear interpolation) empirical quantile.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Observation probabilities for a setting, from the realized target matrix.
pub fn probabilities(a_star: &DenseMatrix, setting: Setting) -> DenseMatrix {
    let (low, high) = match setting {
        Setting::Uniform => return DenseMatrix::from_element(a_star.nrows(), a_star.ncols(), 0.25),
        Setting::HighObserved => (1.0 / 16.0, 7.0 / 16.0),
        Setting::LowObserved => (7.0 / 16.0, 1.0 / 16.0),
    };
    let mut sorted: Vec<f64> = a_star.iter().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let q25 = quantile_sorted(&sorted, 0.25);
    let q75 = quantile_sorted(&sorted, 0.75);
    a_star.map(|a| {
        if a <= q25 {
            low
        } else if a <= q75 {
            0.25
        } else {
            high
        }
    })
}

pub fn generate_instance(n1: usize, n2: usize, rank: usize, setting: Setting, snr: f64, seed: u64) -> Result<SyntheticInstance> {
    generate_instance_with(n1, n2, rank, setting, snr, seed, NoiseCalibration::Expected)
}

/// Draws, from one ChaCha20 stream keyed by `seed`, in this order: `U` and
/// `V` (row-major, Uniform[0,2)), the noise `ε` (row-major), then the mask
/// (row-major, one uniform per cell compared against `π`).
pub fn generate_instance_with(
    n1: usize,
    n2: usize,
    rank: usize,
    setting: Setting,
    snr: f64,
    seed: u64,
    calibration: NoiseCalibration,
) -> Result<SyntheticInstance> {
    if n1 == 0 || n2 == 0 || rank == 0 || rank > n1.min(n2) {
        return Err(Error::invalid(format!("need 1 <= rank <= min(n1, n2), got {n1}x{n2} rank {rank}")));
    }
    if !(snr > 0.0) || !snr.is_finite() {
        return Err(Error::invalid(format!("snr must be positive, got {snr}")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut draw_factor = |rows: usize| {
        let mut data = Vec::with_capacity(rows * rank);
        for _ in 0..rows * rank {
            data.push(2.0 * rng.random::<f64>());
        }
        DenseMatrix::from_row_slice(rows, rank, &data)
    };
    let u = draw_factor(n1);
    let v = draw_factor(n2);
    let a_star = &u * v.transpose();

    let sigma_eps = match calibration {
        NoiseCalibration::Expected => noise_sd(rank, snr),
        NoiseCalibration::Realized => a_star.norm() / ((n1 * n2) as f64).sqrt() / snr,
    };
    let mut y = a_star.clone();
    for i in 0..n1 {
        for j in 0..n2 {
            let e: f64 = StandardNormal.sample(&mut rng);
            y[(i, j)] += sigma_eps * e;
        }
    }

    let pi = probabilities(&a_star, setting);
    let mut t = DenseMatrix::zeros(n1, n2);
    for i in 0..n1 {
        for j in 0..n2 {
            if rng.random::<f64>() < pi[(i, j)] {
                t[(i, j)] = 1.0;
            }
        }
    }
    let mask = Mask::from_matrix(t)?;
    Ok(SyntheticInstance {
        a_star,
        pi,
        y,
        mask,
        seed,
        setting,
        snr,
        sigma_eps,
        rank,
    })
}
