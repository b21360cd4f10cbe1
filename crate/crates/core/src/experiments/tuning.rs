//! Validation-split tuning over (balancing percentage, β, μ).

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::admm::{admm_solve, AdmmConfig};
use crate::error::{Error, Result};
use crate::linalg::{estimate_rank, DenseMatrix, DEFAULT_RANK_TOL};
use crate::mask::Mask;
use crate::pgd::{pgd_solve, pgd_solve_from, FactorPair, PgdConfig, Radius};
use crate::weights::{
    balancing_profile_with_solutions, default_kappa_grid, pool_solutions, select_indices_by_percentage,
    solve_weights,
    WeightOptions,
};

use super::metrics::Rating;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Admm,
    Pgd,
}

/// Which weights enter the data-fit term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Balancing weights selected by percentage.
    Balanced,
    /// `W ≡ 1`.
    Uniform,
}

impl Weighting {
    pub fn label(self) -> &'static str {
        match self {
            Weighting::Balanced => "balanced",
            Weighting::Uniform => "uniform",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    /// Ignored for [`Weighting::Uniform`].
    pub balancing_pcts: Vec<f64>,
}

impl Grids {
    fn validate(&self, weighting: Weighting) -> Result<()> {
        if self.beta.is_empty() || self.mu.is_empty() {
            return Err(Error::invalid("beta and mu grids must be nonempty"));
        }
        if weighting == Weighting::Balanced && self.balancing_pcts.is_empty() {
            return Err(Error::invalid("balancing percentage grid must be nonempty"));
        }
        if self.beta.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return Err(Error::invalid("beta values must be positive"));
        }
        if self.mu.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(Error::invalid("mu values must be nonnegative"));
        }
        if self.balancing_pcts.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("balancing percentages must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    pub solver: SolverKind,
    pub weighting: Weighting,
    /// Fraction of observed entries held out when no validation set is given.
    pub val_frac: f64,
    pub split_seed: u64,
    /// κ′ values for the balancing profile; `None` uses `kappa_points`
    /// log-spaced defaults.
    pub kappa_grid: Option<Vec<f64>>,
    pub kappa_points: usize,
    /// Bisection steps in `log κ′` between the two profile points bracketing
    /// each target percentage; 0 selects from the grid alone.
    pub refine_steps: usize,
    pub weight: WeightOptions,
    /// Scale μ by the mean weight mass `ΣW/(n₁n₂)` of each candidate, so one μ
    /// grid fits weighted and unweighted losses alike.
    pub normalize_mu: bool,
    pub pgd_rank: usize,
    pub pgd_max_iter: usize,
    pub pgd_tol: f64,
    pub pgd_radius: Radius,
    pub pgd_momentum: bool,
    /// Start each PGD fit on a μ path from the previous one; when off every
    /// grid point is a cold spectral start.
    pub warm_start: bool,
    pub admm: AdmmConfig,
    pub rank_tol: f64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            solver: SolverKind::Pgd,
            weighting: Weighting::Balanced,
            val_frac: 0.2,
            split_seed: 0,
            kappa_grid: None,
            kappa_points: 8,
            refine_steps: 6,
            weight: WeightOptions::default(),
            normalize_mu: true,
            pgd_rank: 30,
            pgd_max_iter: 5000,
            pgd_tol: 1e-5,
            pgd_radius: Radius::SqrtBeta,
            pgd_momentum: true,
            warm_start: true,
            admm: AdmmConfig::new(1.0, 0.0),
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

/// Observed data for tuning. Without an explicit validation set, a split of
/// the observed entries is drawn from `split_seed`.
#[derive(Debug, Clone, Copy)]
pub struct TuningData<'a> {
    pub y: &'a DenseMatrix,
    pub mask: &'a Mask,
    pub validation: Option<&'a [Rating]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChosenParams {
    pub beta: f64,
    /// Grid value of μ.
    pub mu: f64,
    /// μ actually passed to the solver.
    pub mu_effective: f64,
    /// `None` for uniform weights.
    pub kappa_prime: Option<f64>,
    pub balancing_pct: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub params: ChosenParams,
    pub validation_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub a_hat: DenseMatrix,
    pub weights: DenseMatrix,
    pub chosen: ChosenParams,
    pub validation_rmse: f64,
    pub est_rank: usize,
    /// Every grid point in evaluation order.
    pub scores: Vec<GridScore>,
}

/// Holds out `⌊frac·N⌋` observed entries uniformly without replacement.
pub fn split_validation(mask: &Mask, frac: f64, seed: u64) -> Result<(Mask, Mask)> {
    if !(frac > 0.0 && frac < 1.0) {
        return Err(Error::invalid(format!("validation fraction must be in (0,1), got {frac}")));
    }
    let n = mask.count();
    if n < 2 {
        return Err(Error::invalid("need at least two observed entries to split"));
    }
    let k = (frac * n as f64).floor() as usize;
    if k == 0 {
        return Err(Error::invalid(format!("validation set of {frac} x {n} entries is empty")));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut held = vec![false; n];
    for idx in rand::seq::index::sample(&mut rng, n, k) {
        held[idx] = true;
    }
    let (n1, n2) = mask.shape();
    let (mut train, mut val) = (DenseMatrix::zeros(n1, n2), DenseMatrix::zeros(n1, n2));
    for (&(i, j), &h) in mask.observed().iter().zip(&held) {
        if h {
            val[(i, j)] = 1.0;
        } else {
            train[(i, j)] = 1.0;
        }
    }
    Ok((Mask::from_matrix(train)?, Mask::from_matrix(val)?))
}

fn validation_rmse(a: &DenseMatrix, val: &[Rating]) -> f64 {
    let sq: f64 = val.iter().map(|r| (a[(r.row, r.col)] - r.value).powi(2)).sum();
    (sq / val.len() as f64).sqrt()
}

struct Candidate {
    weights: DenseMatrix,
    kappa_prime: Option<f64>,
    pct: Option<f64>,
}

fn weight_mass(w: &DenseMatrix, mask: &Mask) -> f64 {
    let s: f64 = mask.observed().iter().map(|&(i, j)| w[(i, j)]).sum();
    s / (mask.nrows() * mask.ncols()) as f64
}

fn effective_mu(mu: f64, w: &DenseMatrix, mask: &Mask, opts: &TuneOptions) -> f64 {
    if opts.normalize_mu {
        mu * weight_mass(w, mask)
    } else {
        mu
    }
}

fn candidates(train: &Mask, grids: &Grids, opts: &TuneOptions) -> Result<Vec<Candidate>> {
    let (n1, n2) = train.shape();
    match opts.weighting {
        Weighting::Uniform => Ok(vec![Candidate {
            weights: DenseMatrix::from_element(n1, n2, 1.0),
            kappa_prime: None,
            pct: None,
        }]),
        Weighting::Balanced => {
            let kgrid = opts.kappa_grid.clone().unwrap_or_else(|| default_kappa_grid(n1, n2, opts.kappa_points));
            let (profile, solutions) = balancing_profile_with_solutions(train, &kgrid, &opts.weight)?;
            let idx = select_indices_by_percentage(&profile, &grids.balancing_pcts)?;
            let pcts = profile.percentages();
            let pct_of = |h: f64| {
                if profile.h_max > profile.h_min {
                    (profile.h_max - h) / (profile.h_max - profile.h_min)
                } else {
                    1.0
                }
            };
            let mut out: Vec<Candidate> = Vec::new();
            for (&target, k) in grids.balancing_pcts.iter().zip(idx) {
                let mut pick = (solutions[k].clone(), pcts[k]);
                if opts.refine_steps > 0 {
                    if let Some(a) = (0..pcts.len() - 1).find(|&a| pcts[a] >= target && target > pcts[a + 1]) {
                        let (mut lo, mut hi) = (solutions[a].kappa_prime, solutions[a + 1].kappa_prime);
                        for _ in 0..opts.refine_steps {
                            let mid = if lo > 0.0 { (lo * hi).sqrt() } else { 0.5 * hi };
                            let mut sol = solve_weights(train, mid, &opts.weight)?;
                            pool_solutions(std::slice::from_mut(&mut sol), &solutions);
                            let p = pct_of(sol.h_value);
                            if p >= target {
                                lo = mid;
                            } else {
                                hi = mid;
                            }
                            if (p - target).abs() < (pick.1 - target).abs() {
                                pick = (sol, p);
                            }
                        }
                    }
                }
                let (sol, pct) = pick;
                if out.iter().any(|c| c.kappa_prime == Some(sol.kappa_prime)) {
                    continue;
                }
                out.push(Candidate {
                    weights: sol.weights,
                    kappa_prime: Some(sol.kappa_prime),
                    pct: Some(pct),
                });
            }
            Ok(out)
        }
    }
}

fn fit_one(
    y: &DenseMatrix,
    mask: &Mask,
    w: &DenseMatrix,
    beta: f64,
    mu: f64,
    opts: &TuneOptions,
    warm: Option<&FactorPair>,
) -> Result<(DenseMatrix, Option<FactorPair>, bool)> {
    match opts.solver {
        SolverKind::Admm => {
            let cfg = AdmmConfig { beta, mu, ..opts.admm };
            Ok((admm_solve(y, mask, w, &cfg)?.a_hat, None, true))
        }
        SolverKind::Pgd => {
            let rank = opts.pgd_rank.min(mask.nrows().min(mask.ncols()));
            let cfg = PgdConfig {
                max_iter: opts.pgd_max_iter,
                tol: opts.pgd_tol,
                radius: opts.pgd_radius,
                momentum: opts.pgd_momentum,
                ..PgdConfig::new(beta, mu, rank)
            };
            let sol = match warm {
                Some(init) => pgd_solve_from(y, mask, w, &cfg, init)?,
                None => pgd_solve(y, mask, w, &cfg)?,
            };
            Ok((sol.a_hat, Some(sol.factors), sol.constrained))
        }
    }
}

/// Fits along ascending μ, each warm-started from the previous fit. Returns
/// `(Â, μ_eff)` per grid value and whether the bound was active anywhere.
fn fit_path(
    y: &DenseMatrix,
    train: &Mask,
    cand: &Candidate,
    beta: f64,
    mus: &[f64],
    opts: &TuneOptions,
) -> Result<(Vec<(DenseMatrix, f64)>, bool)> {
    let mut path = Vec::with_capacity(mus.len());
    let mut warm: Option<FactorPair> = None;
    let mut any_active = false;
    for &mu in mus {
        let mu_eff = effective_mu(mu, &cand.weights, train, opts);
        let (a, factors, active) =
            fit_one(y, train, &cand.weights, beta, mu_eff, opts, warm.as_ref()).map_err(|e| Error::GridPoint {
                context: format!("beta={beta}, mu={mu}, kappa'={:?}", cand.kappa_prime),
                source: Box::new(e),
            })?;
        any_active |= active;
        if opts.warm_start {
            warm = factors;
        }
        path.push((a, mu_eff));
    }
    Ok((path, any_active))
}

fn better(a: &GridScore, b: &GridScore) -> bool {
    let key = |s: &GridScore| {
        (
            s.validation_rmse,
            s.params.mu,
            s.params.beta,
            s.params.kappa_prime.unwrap_or(0.0),
        )
    };
    let (ka, kb) = (key(a), key(b));
    ka.0.total_cmp(&kb.0)
        .then(ka.1.total_cmp(&kb.1))
        .then(ka.2.total_cmp(&kb.2))
        .then(ka.3.total_cmp(&kb.3))
        .is_lt()
}

/// Fits every grid point on the training entries, picks the smallest
/// validation RMSE and refits on all observed entries.
///
/// For each weight candidate and β the μ grid is traversed from smallest to
/// largest, each PGD fit warm-started from the previous one. The refit is a
/// cold start. With a caller-supplied validation set the training entries are
/// the whole mask and the refit is skipped.
pub fn tune_and_fit(data: TuningData<'_>, grids: &Grids, opts: &TuneOptions) -> Result<TuneOutcome> {
    grids.validate(opts.weighting)?;
    data.mask.check_conformable("Y", data.y)?;
    let (train, val): (Mask, Vec<Rating>) = match data.validation {
        Some(v) => {
            if v.is_empty() {
                return Err(Error::invalid("validation set is empty"));
            }
            if let Some(r) = v.iter().find(|r| r.row >= data.mask.nrows() || r.col >= data.mask.ncols()) {
                return Err(Error::invalid(format!("validation rating ({},{}) out of range", r.row, r.col)));
            }
            (data.mask.clone(), v.to_vec())
        }
        None => {
            let (train, val) = split_validation(data.mask, opts.val_frac, opts.split_seed)?;
            let ratings = val
                .observed()
                .iter()
                .map(|&(i, j)| Rating::new(i, j, data.y[(i, j)]))
                .collect();
            (train, ratings)
        }
    };

    let cands = candidates(&train, grids, opts)?;
    let mut mus = grids.mu.clone();
    mus.sort_by(f64::total_cmp);
    let mut betas = grids.beta.clone();
    betas.sort_by(f64::total_cmp);
    let mut scores = Vec::new();
    let mut best: Option<(GridScore, DenseMatrix, usize)> = None;
    for (ci, cand) in cands.iter().enumerate() {
        // a path on which the bound never bound is reused for every larger β
        let mut carried: Option<Vec<(DenseMatrix, f64)>> = None;
        for &beta in &betas {
            let path = match carried.clone() {
                Some(path) => path,
                None => {
                    let (path, active) = fit_path(data.y, &train, cand, beta, &mus, opts)?;
                    if !active {
                        carried = Some(path.clone());
                    }
                    path
                }
            };
            for ((a, mu_eff), &mu) in path.iter().zip(&mus) {
                let score = GridScore {
                    params: ChosenParams {
                        beta,
                        mu,
                        mu_effective: *mu_eff,
                        kappa_prime: cand.kappa_prime,
                        balancing_pct: cand.pct,
                    },
                    validation_rmse: validation_rmse(a, &val),
                };
                scores.push(score);
                if best.as_ref().is_none_or(|(b, _, _)| better(&score, b)) {
                    best = Some((score, a.clone(), ci));
                }
            }
        }
    }
    let (winner, tuned_fit, ci) = best.expect("nonempty grids");

    let (a_hat, weights, chosen) = if data.validation.is_some() {
        (tuned_fit, cands[ci].weights.clone(), winner.params)
    } else {
        let weights = match winner.params.kappa_prime {
            Some(k) => solve_weights(data.mask, k, &opts.weight)?.weights,
            None => DenseMatrix::from_element(data.mask.nrows(), data.mask.ncols(), 1.0),
        };
        let mu_eff = effective_mu(winner.params.mu, &weights, data.mask, opts);
        let (a, _, _) = fit_one(data.y, data.mask, &weights, winner.params.beta, mu_eff, opts, None).map_err(|e| {
            Error::GridPoint {
                context: "refit on all observed entries".into(),
                source: Box::new(e),
            }
        })?;
        (a, weights, ChosenParams { mu_effective: mu_eff, ..winner.params })
    };
    let est_rank = estimate_rank(&a_hat, opts.rank_tol)?;
    Ok(TuneOutcome {
        a_hat,
        weights,
        chosen,
        validation_rmse: winner.validation_rmse,
        est_rank,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{generate_instance, Setting};

    fn mask_with(n: usize, count: usize) -> Mask {
        let idx: Vec<_> = (0..count).map(|k| (k / n, k % n)).collect();
        Mask::from_indices(n, n, &idx).unwrap()
    }

    #[test]
    fn split_counts_and_disjointness() {
        let t = mask_with(12, 100);
        let (train, val) = split_validation(&t, 0.2, 9).unwrap();
        assert_eq!((train.count(), val.count()), (80, 20));
        for &(i, j) in t.observed() {
            assert!(train.is_observed(i, j) ^ val.is_observed(i, j));
        }
        assert_eq!(split_validation(&t, 0.2, 9).unwrap(), (train, val));

        let (_, val) = split_validation(&mask_with(4, 7), 0.5, 1).unwrap();
        assert_eq!(val.count(), 3);
        assert!(split_validation(&mask_with(4, 1), 0.5, 1).is_err());
        assert!(split_validation(&mask_with(4, 3), 0.2, 1).is_err());
        assert!(split_validation(&mask_with(4, 7), 1.0, 1).is_err());
    }

    fn small_opts(weighting: Weighting) -> TuneOptions {
        TuneOptions {
            weighting,
            pgd_rank: 6,
            kappa_points: 5,
            refine_steps: 2,
            ..TuneOptions::default()
        }
    }

    #[test]
    fn single_point_grid_is_a_direct_fit() {
        let inst = generate_instance(30, 30, 2, Setting::Uniform, 5.0, 4).unwrap();
        let grids = Grids {
            beta: vec![8.0],
            mu: vec![1e-3],
            balancing_pcts: vec![1.0],
        };
        let opts = small_opts(Weighting::Uniform);
        let data = TuningData { y: &inst.y, mask: &inst.mask, validation: None };
        let out = tune_and_fit(data, &grids, &opts).unwrap();
        let w = DenseMatrix::from_element(30, 30, 1.0);
        let mu_eff = effective_mu(1e-3, &w, &inst.mask, &opts);
        let (direct, _, _) = fit_one(&inst.y, &inst.mask, &w, 8.0, mu_eff, &opts, None).unwrap();
        assert_eq!(out.a_hat, direct);
        assert_eq!(out.scores.len(), 1);
        assert_eq!(out.chosen.mu_effective, mu_eff);
    }

    #[test]
    fn winner_minimizes_validation_error() {
        // noiseless rank one; the grid contains the oracle parameters (large β, tiny μ)
        let u = DenseMatrix::from_fn(20, 1, |i, _| 1.0 + (i % 5) as f64 * 0.2);
        let v = DenseMatrix::from_fn(18, 1, |j, _| 0.5 + (j % 4) as f64 * 0.3);
        let y = &u * v.transpose();
        let idx: Vec<_> = (0..20).flat_map(|i| (0..18).map(move |j| (i, j))).filter(|(i, j)| (i * 7 + j * 3) % 3 != 0).collect();
        let t = Mask::from_indices(20, 18, &idx).unwrap();
        let grids = Grids {
            beta: vec![0.5, 10.0],
            mu: vec![1e-6, 1e-2, 1.0],
            balancing_pcts: vec![1.0, 0.5],
        };
        for weighting in [Weighting::Uniform, Weighting::Balanced] {
            let opts = TuneOptions { pgd_rank: 3, pgd_tol: 1e-10, ..small_opts(weighting) };
            let out = tune_and_fit(TuningData { y: &y, mask: &t, validation: None }, &grids, &opts).unwrap();
            let min = out.scores.iter().map(|s| s.validation_rmse).fold(f64::INFINITY, f64::min);
            assert_eq!(out.validation_rmse, min);
            assert_eq!(out.chosen.beta, 10.0);
            assert!(out.validation_rmse < 1e-2, "{}", out.validation_rmse);
        }
    }

    #[test]
    fn exhaustive_rescoring_matches() {
        let inst = generate_instance(50, 50, 3, Setting::Uniform, 5.0, 11).unwrap();
        let grids = Grids {
            beta: vec![4.0, 6.0, 9.0],
            mu: vec![1e-3, 3e-3, 1e-2],
            balancing_pcts: vec![1.0, 0.75, 0.5],
        };
        let opts = TuneOptions {
            warm_start: false,
            ..small_opts(Weighting::Balanced)
        };
        let out = tune_and_fit(TuningData { y: &inst.y, mask: &inst.mask, validation: None }, &grids, &opts).unwrap();
        assert!(out.scores.len() <= 27 && out.scores.len() >= 9);

        let (train, val) = split_validation(&inst.mask, opts.val_frac, opts.split_seed).unwrap();
        // weights come from the pooled profile, so look them up rather than re-solving
        let cands = candidates(&train, &grids, &opts).unwrap();
        let mut best = f64::INFINITY;
        for s in &out.scores {
            let p = &s.params;
            let w = &cands.iter().find(|c| c.kappa_prime == p.kappa_prime).unwrap().weights;
            let mu_eff = effective_mu(p.mu, w, &train, &opts);
            let (a, _, _) = fit_one(&inst.y, &train, w, p.beta, mu_eff, &opts, None).unwrap();
            let mut sq = 0.0;
            for &(i, j) in val.observed() {
                sq += (a[(i, j)] - inst.y[(i, j)]).powi(2);
            }
            let rescored = (sq / val.count() as f64).sqrt();
            assert!((rescored - s.validation_rmse).abs() < 1e-12, "{rescored} vs {}", s.validation_rmse);
            best = best.min(rescored);
        }
        assert_eq!(out.validation_rmse, best);
    }

    #[test]
    fn empty_grids_rejected() {
        let t = mask_with(4, 10);
        let y = DenseMatrix::zeros(4, 4);
        let grids = Grids { beta: vec![], mu: vec![1.0], balancing_pcts: vec![1.0] };
        assert!(tune_and_fit(TuningData { y: &y, mask: &t, validation: None }, &grids, &TuneOptions::default()).is_err());
    }
}
