//! Replicated simulation runs and their summary tables.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{spectral_norm, DenseMatrix};
use crate::mask::Mask;

use super::metrics::EvaluationReport;
use super::simulate::{generate_instance_with, NoiseCalibration, Setting, SyntheticInstance};
use super::tuning::{tune_and_fit, Grids, SolverKind, TuneOptions, TuningData, Weighting};

/// Environment variable capping the number of replicate worker threads.
pub const THREADS_ENV: &str = "BALANCED_MC_THREADS";

/// Per-instance grids derived from the data.
///
/// β values are multiples of `max|A★_ij|`, a lower bound on `‖A★‖_max`. μ
/// values are `μ₀·10^e` with `μ₀ = 2‖T∘Y‖/N`, the smallest penalty that
/// zeroes an estimate fitted with weights `n₁n₂/N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRule {
    pub beta_factors: Vec<f64>,
    pub mu_exponents: Vec<f64>,
    pub balancing_pcts: Vec<f64>,
}

impl Default for GridRule {
    fn default() -> Self {
        GridRule {
            beta_factors: vec![1.0, 1.5, 2.0],
            mu_exponents: vec![-0.5, -1.0, -1.5, -2.0, -2.5],
            balancing_pcts: vec![1.0, 0.75, 0.5],
        }
    }
}

impl GridRule {
    /// Grids for a synthetic instance, with β scaled by `max|A★_ij|`.
    pub fn resolve(&self, inst: &SyntheticInstance) -> Result<Grids> {
        self.resolve_scaled(inst.a_star.amax(), &inst.y, &inst.mask)
    }

    /// Grids for observed data alone, with β scaled by the largest observed `|Y_ij|`.
    pub fn resolve_observed(&self, y: &DenseMatrix, mask: &Mask) -> Result<Grids> {
        let scale = mask.observed().iter().fold(0.0f64, |m, &(i, j)| m.max(y[(i, j)].abs()));
        self.resolve_scaled(scale, y, mask)
    }

    fn resolve_scaled(&self, beta_scale: f64, y: &DenseMatrix, mask: &Mask) -> Result<Grids> {
        mask.check_conformable("Y", y)?;
        if !(beta_scale > 0.0) {
            return Err(Error::invalid("cannot scale the beta grid: data are identically zero"));
        }
        let mu0 = 2.0 * spectral_norm(&mask.apply(y))? / mask.count() as f64;
        Ok(Grids {
            beta: self.beta_factors.iter().map(|f| f * beta_scale).collect(),
            mu: self.mu_exponents.iter().map(|e| mu0 * 10f64.powf(*e)).collect(),
            balancing_pcts: self.balancing_pcts.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationConfig {
    pub setting: Setting,
    pub snr: f64,
    pub n1: usize,
    pub n2: usize,
    pub rank: usize,
    pub n_reps: usize,
    pub base_seed: u64,
    pub solver: SolverKind,
    pub methods: Vec<Weighting>,
    pub grids: GridRule,
    pub calibration: NoiseCalibration,
    /// Template for every fit; `weighting`, `solver` and `split_seed` are overridden.
    pub tune: TuneOptions,
    /// Absolute β and μ grids replacing the rule-derived ones when set.
    pub fixed_beta: Option<Vec<f64>>,
    pub fixed_mu: Option<Vec<f64>>,
    /// Worker threads; falls back to the environment cap, then to rayon's default.
    pub threads: Option<usize>,
}

impl ReplicationConfig {
    pub fn new(setting: Setting, snr: f64, n_reps: usize, base_seed: u64) -> Self {
        ReplicationConfig {
            setting,
            snr,
            n1: 200,
            n2: 200,
            rank: 5,
            n_reps,
            base_seed,
            solver: SolverKind::Pgd,
            methods: vec![Weighting::Balanced, Weighting::Uniform],
            grids: GridRule::default(),
            calibration: NoiseCalibration::Expected,
            tune: TuneOptions::default(),
            fixed_beta: None,
            fixed_mu: None,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub seed: u64,
    pub method: Weighting,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
}

impl MeanSe {
    /// Sample mean and `sd/√n` (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        if values.len() < 2 {
            return MeanSe { mean, se: 0.0 };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        MeanSe { mean, se: (var / n).sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Weighting,
    pub setting: Setting,
    pub snr: f64,
    pub rmse: MeanSe,
    pub te: MeanSe,
    pub rank: MeanSe,
    pub n_reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
    /// Seed-sorted, methods in configuration order within a seed.
    pub replicates: Vec<ReplicateResult>,
}

fn run_one(cfg: &ReplicationConfig, seed: u64) -> Result<Vec<ReplicateResult>> {
    let inst = generate_instance_with(cfg.n1, cfg.n2, cfg.rank, cfg.setting, cfg.snr, seed, cfg.calibration)?;
    let mut grids = cfg.grids.resolve(&inst)?;
    if let Some(b) = &cfg.fixed_beta {
        grids.beta = b.clone();
    }
    if let Some(m) = &cfg.fixed_mu {
        grids.mu = m.clone();
    }
    cfg.methods
        .iter()
        .map(|&method| {
            let opts = TuneOptions {
                solver: cfg.solver,
                weighting: method,
                split_seed: seed,
                ..cfg.tune.clone()
            };
            let data = TuningData {
                y: &inst.y,
                mask: &inst.mask,
                validation: None,
            };
            let out = tune_and_fit(data, &grids, &opts)?;
            Ok(ReplicateResult {
                seed,
                method,
                report: evaluate_on_instance(&out.a_hat, &inst, &opts, out.chosen, seed)?,
            })
        })
        .collect()
}

fn evaluate_on_instance(
    a_hat: &DenseMatrix,
    inst: &SyntheticInstance,
    opts: &TuneOptions,
    chosen: super::tuning::ChosenParams,
    seed: u64,
) -> Result<EvaluationReport> {
    let mut report = EvaluationReport::compute(a_hat, Some((&inst.a_star, &inst.mask)), None, opts.rank_tol)?;
    report.chosen = Some(chosen);
    report.replicate_seed = Some(seed);
    Ok(report)
}

fn thread_cap() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs replicates `base_seed + i`, `i < n_reps`, possibly in parallel; the
/// summary depends only on the seed-sorted results.
pub fn run_replications(cfg: &ReplicationConfig) -> Result<SummaryTable> {
    if cfg.n_reps == 0 {
        return Err(Error::invalid("n_reps must be at least 1"));
    }
    if cfg.methods.is_empty() {
        return Err(Error::invalid("no methods requested"));
    }
    let seeds: Vec<u64> = (0..cfg.n_reps as u64).map(|i| cfg.base_seed.wrapping_add(i)).collect();
    let work = || seeds.par_iter().map(|&s| run_one(cfg, s)).collect::<Result<Vec<_>>>();
    let nested = match cfg.threads.or_else(thread_cap) {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?
            .install(work)?,
        None => work()?,
    };
    let mut replicates: Vec<ReplicateResult> = nested.into_iter().flatten().collect();
    replicates.sort_by_key(|r| r.seed);

    let rows = cfg
        .methods
        .iter()
        .map(|&method| {
            let mine: Vec<&EvaluationReport> =
                replicates.iter().filter(|r| r.method == method).map(|r| &r.report).collect();
            let pick = |f: fn(&EvaluationReport) -> f64| MeanSe::of(&mine.iter().map(|r| f(r)).collect::<Vec<_>>());
            SummaryRow {
                method,
                setting: cfg.setting,
                snr: cfg.snr,
                rmse: pick(|r| r.rmse.unwrap_or(f64::NAN)),
                te: pick(|r| r.te.unwrap_or(f64::NAN)),
                rank: pick(|r| r.est_rank as f64),
                n_reps: mine.len(),
            }
        })
        .collect();
    Ok(SummaryTable { rows, replicates })
}

impl SummaryTable {
    pub const CSV_HEADER: &'static str = "method,setting,snr,mean_rmse,se_rmse,mean_te,se_te,mean_rank,se_rank";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.method.label(),
                r.setting.index(),
                r.snr,
                r.rmse.mean,
                r.rmse.se,
                r.te.mean,
                r.te.se,
                r.rank.mean,
                r.rank.se
            );
        }
        out
    }

    /// Fixed-width table with `mean(se)` cells.
    pub fn to_text(&self) -> String {
        let cell = |m: &MeanSe| format!("{:.3}({:.3})", m.mean, m.se);
        let mut out = String::new();
        let mut last: Option<(Setting, u64)> = None;
        for r in &self.rows {
            let key = (r.setting, r.snr.to_bits());
            if last != Some(key) {
                let _ = writeln!(out, "Setting {}  SNR={}  reps={}", r.setting.index(), r.snr, r.n_reps);
                let _ = writeln!(out, "{:<10} {:>16} {:>16} {:>16}", "method", "RMSE", "TE", "rank");
                last = Some(key);
            }
            let _ = writeln!(
                out,
                "{:<10} {:>16} {:>16} {:>16}",
                r.method.label(),
                cell(&r.rmse),
                cell(&r.te),
                cell(&r.rank)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mean_se() {
        let one = MeanSe::of(&[0.7]);
        assert_eq!(one, MeanSe { mean: 0.7, se: 0.0 });
        let m = MeanSe::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_abs_diff_eq!(m.mean, 2.5, epsilon = 1e-15);
        assert_abs_diff_eq!(m.se, (5.0f64 / 3.0 / 4.0).sqrt(), epsilon = 1e-15);
    }

    fn tiny(n_reps: usize) -> ReplicationConfig {
        let mut cfg = ReplicationConfig::new(Setting::HighObserved, 5.0, n_reps, 40);
        cfg.n1 = 24;
        cfg.n2 = 20;
        cfg.rank = 2;
        cfg.tune.pgd_rank = 5;
        cfg.tune.kappa_points = 4;
        cfg.tune.refine_steps = 1;
        cfg.grids = GridRule {
            beta_factors: vec![1.0, 2.0],
            mu_exponents: vec![-1.0, -2.0],
            balancing_pcts: vec![1.0, 0.5],
        };
        cfg
    }

    #[test]
    fn single_replicate_has_zero_se() {
        let t = run_replications(&tiny(1)).unwrap();
        assert_eq!(t.rows.len(), 2);
        for row in &t.rows {
            let rep = t.replicates.iter().find(|r| r.method == row.method).unwrap();
            assert_eq!(row.rmse, MeanSe { mean: rep.report.rmse.unwrap(), se: 0.0 });
            assert_eq!(row.te.se, 0.0);
            assert_eq!(row.rank.se, 0.0);
        }
        let csv = t.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with(SummaryTable::CSV_HEADER));
        assert!(csv.lines().nth(1).unwrap().starts_with("balanced,2,5,"));
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let mut one = tiny(3);
        one.threads = Some(1);
        let mut many = tiny(3);
        many.threads = Some(3);
        let (a, b) = (run_replications(&one).unwrap(), run_replications(&many).unwrap());
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.replicates, b.replicates);
        let seeds: Vec<u64> = a.replicates.iter().map(|r| r.seed).collect();
        assert_eq!(seeds, vec![40, 40, 41, 41, 42, 42]);
    }

    #[test]
    fn fixed_grids_override_the_rule() {
        let mut cfg = tiny(1);
        cfg.methods = vec![Weighting::Uniform];
        cfg.fixed_beta = Some(vec![7.5]);
        cfg.fixed_mu = Some(vec![0.01]);
        let t = run_replications(&cfg).unwrap();
        let chosen = t.replicates[0].report.chosen.as_ref().unwrap();
        assert_eq!((chosen.beta, chosen.mu), (7.5, 0.01));
        cfg.n_reps = 0;
        assert!(run_replications(&cfg).is_err());
    }
}
