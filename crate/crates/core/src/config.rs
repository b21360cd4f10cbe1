//! Flat `key = value` run configuration shared by every subcommand.
//!
//! Lists are comma-separated. Lines starting with `#` are comments. Keys:
//!
//! | key | meaning | default |
//! |-----|---------|---------|
//! | `solver` | `pgd` or `admm` | `pgd` |
//! | `method` | `balanced`, `uniform` or `both` | `both` |
//! | `setting`, `snr`, `n1`, `n2`, `rank` | synthetic design | `1`, `5`, `200`, `200`, `5` |
//! | `calibration` | noise level from `expected` or `realized` signal power | `expected` |
//! | `reps`, `seed` | replicates and base seed | `20`, `1` |
//! | `beta`, `mu` | absolute grids; override the factor rules below | unset |
//! | `beta_factors` | multiples of the β scale | `1,1.5,2` |
//! | `mu_exponents` | decades relative to `2‖T∘Y‖/N` | `-0.5,-1,-1.5,-2,-2.5` |
//! | `pcts` | balancing percentages | `1,0.75,0.5` |
//! | `val_frac` | held-out fraction of observed entries | `0.2` |
//! | `kappa`, `kappa_points`, `refine_steps` | κ′ profile | unset, `8`, `6` |
//! | `weight_max_iter`, `weight_tol`, `weight_window`, `step0` | weight solver | `2000`, `1e-4`, `20`, `1` |
//! | `pgd_rank`, `pgd_max_iter`, `pgd_tol`, `radius`, `momentum`, `warm_start` | factored solver | `30`, `5000`, `1e-5`, `sqrt_beta`, `true`, `true` |
//! | `rho`, `tau`, `admm_max_iter`, `admm_tol`, `admm_paper_signs` | ADMM | `0.1`, `1.618`, `2000`, `1e-5`, `false` |
//! | `rank_tol` | relative singular value cutoff for the estimated rank | `1e-4` |
//! | `delimiter`, `one_indexed`, `header` | triplet file schema | `comma`, `true`, `false` |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::admm::AdmmConfig;
use crate::error::{Error, Result};
use crate::experiments::{GridRule, NoiseCalibration, Setting, SolverKind, TuneOptions, Weighting};
use crate::io::{Delimiter, TripletSchema};
use crate::linalg::DEFAULT_RANK_TOL;
use crate::pgd::Radius;
use crate::weights::{StepRule, WeightOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub solver: SolverKind,
    pub method: String,
    pub setting: u8,
    pub snr: f64,
    pub n1: usize,
    pub n2: usize,
    pub rank: usize,
    pub calibration: NoiseCalibration,
    pub reps: usize,
    pub seed: u64,
    pub beta: Option<Vec<f64>>,
    pub mu: Option<Vec<f64>>,
    pub beta_factors: Vec<f64>,
    pub mu_exponents: Vec<f64>,
    pub pcts: Vec<f64>,
    pub val_frac: f64,
    pub kappa: Option<Vec<f64>>,
    pub kappa_points: usize,
    pub refine_steps: usize,
    pub weight_max_iter: usize,
    pub weight_tol: f64,
    pub weight_window: usize,
    pub step0: f64,
    pub pgd_rank: usize,
    pub pgd_max_iter: usize,
    pub pgd_tol: f64,
    pub radius: Radius,
    pub momentum: bool,
    pub warm_start: bool,
    pub rho: f64,
    pub tau: f64,
    pub admm_max_iter: usize,
    pub admm_tol: f64,
    pub admm_paper_signs: bool,
    pub rank_tol: f64,
    pub delimiter: Delimiter,
    pub one_indexed: bool,
    pub header: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let rule = GridRule::default();
        let tune = TuneOptions::default();
        let admm = AdmmConfig::new(1.0, 0.0);
        let weight = WeightOptions::default();
        let StepRule::InvSqrt { step0 } = weight.step_rule;
        RunConfig {
            solver: SolverKind::Pgd,
            method: "both".into(),
            setting: 1,
            snr: 5.0,
            n1: 200,
            n2: 200,
            rank: 5,
            calibration: NoiseCalibration::Expected,
            reps: 20,
            seed: 1,
            beta: None,
            mu: None,
            beta_factors: rule.beta_factors,
            mu_exponents: rule.mu_exponents,
            pcts: rule.balancing_pcts,
            val_frac: tune.val_frac,
            kappa: None,
            kappa_points: 8,
            refine_steps: tune.refine_steps,
            weight_max_iter: weight.max_iter,
            weight_tol: weight.tol,
            weight_window: weight.window,
            step0,
            pgd_rank: tune.pgd_rank,
            pgd_max_iter: tune.pgd_max_iter,
            pgd_tol: tune.pgd_tol,
            radius: Radius::SqrtBeta,
            momentum: true,
            warm_start: true,
            rho: admm.rho,
            tau: admm.tau,
            admm_max_iter: admm.max_iter,
            admm_tol: admm.tol,
            admm_paper_signs: admm.paper_signs,
            rank_tol: DEFAULT_RANK_TOL,
            delimiter: Delimiter::Comma,
            one_indexed: true,
            header: false,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse {v:?}")))
}

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    let out: Vec<f64> = v.split(',').map(|x| num(key, x)).collect::<Result<_>>()?;
    if out.is_empty() || out.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(format!("{key}: need a nonempty list of finite numbers")));
    }
    Ok(out)
}

fn boolean(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::invalid(format!("{key}: expected true or false, got {v:?}"))),
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "solver" => {
                self.solver = match v {
                    "pgd" => SolverKind::Pgd,
                    "admm" => SolverKind::Admm,
                    _ => return Err(Error::invalid(format!("solver must be pgd or admm, got {v:?}"))),
                }
            }
            "method" => {
                if !matches!(v, "balanced" | "uniform" | "both") {
                    return Err(Error::invalid(format!("method must be balanced, uniform or both, got {v:?}")));
                }
                self.method = v.to_string();
            }
            "setting" => {
                let s: u8 = num(key, v)?;
                Setting::from_index(s)?;
                self.setting = s;
            }
            "snr" => self.snr = num(key, v)?,
            "n1" => self.n1 = num(key, v)?,
            "n2" => self.n2 = num(key, v)?,
            "rank" => self.rank = num(key, v)?,
            "calibration" => {
                self.calibration = match v {
                    "expected" => NoiseCalibration::Expected,
                    "realized" => NoiseCalibration::Realized,
                    _ => return Err(Error::invalid(format!("calibration must be expected or realized, got {v:?}"))),
                }
            }
            "reps" => self.reps = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "beta" => self.beta = Some(list(key, v)?),
            "mu" => self.mu = Some(list(key, v)?),
            "beta_factors" => self.beta_factors = list(key, v)?,
            "mu_exponents" => self.mu_exponents = list(key, v)?,
            "pcts" => self.pcts = list(key, v)?,
            "val_frac" => self.val_frac = num(key, v)?,
            "kappa" => self.kappa = Some(list(key, v)?),
            "kappa_points" => self.kappa_points = num(key, v)?,
            "refine_steps" => self.refine_steps = num(key, v)?,
            "weight_max_iter" => self.weight_max_iter = num(key, v)?,
            "weight_tol" => self.weight_tol = num(key, v)?,
            "weight_window" => self.weight_window = num(key, v)?,
            "step0" => self.step0 = num(key, v)?,
            "pgd_rank" => self.pgd_rank = num(key, v)?,
            "pgd_max_iter" => self.pgd_max_iter = num(key, v)?,
            "pgd_tol" => self.pgd_tol = num(key, v)?,
            "radius" => {
                self.radius = match v {
                    "sqrt_beta" => Radius::SqrtBeta,
                    "beta" => Radius::Beta,
                    _ => return Err(Error::invalid(format!("radius must be sqrt_beta or beta, got {v:?}"))),
                }
            }
            "momentum" => self.momentum = boolean(key, v)?,
            "warm_start" => self.warm_start = boolean(key, v)?,
            "rho" => self.rho = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "admm_max_iter" => self.admm_max_iter = num(key, v)?,
            "admm_tol" => self.admm_tol = num(key, v)?,
            "admm_paper_signs" => self.admm_paper_signs = boolean(key, v)?,
            "rank_tol" => self.rank_tol = num(key, v)?,
            "delimiter" => self.delimiter = Delimiter::parse(v)?,
            "one_indexed" => self.one_indexed = boolean(key, v)?,
            "header" => self.header = boolean(key, v)?,
            _ => return Err(Error::invalid(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse_str(&mut self, text: &str, origin: &str) -> Result<()> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse = |message: String| Error::Parse {
                path: origin.to_string(),
                line: idx + 1,
                message,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse(format!("expected key = value, got {line:?}")))?;
            self.apply(k.trim(), v).map_err(|e| parse(e.to_string()))?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cfg = RunConfig::default();
        cfg.parse_str(&fs::read_to_string(path)?, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Range checks that single keys cannot express.
    pub fn validate(&self) -> Result<()> {
        if !(self.snr > 0.0) || !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(Error::invalid("snr must be positive and val_frac in (0,1)"));
        }
        if self.n1 == 0 || self.n2 == 0 || self.rank == 0 || self.reps == 0 || self.pgd_rank == 0 {
            return Err(Error::invalid("n1, n2, rank, reps and pgd_rank must be positive"));
        }
        if self.kappa_points == 0 || self.weight_max_iter == 0 || self.pgd_max_iter == 0 || self.admm_max_iter == 0 {
            return Err(Error::invalid("iteration counts and kappa_points must be positive"));
        }
        if !(self.step0 > 0.0) {
            return Err(Error::invalid("step0 must be positive"));
        }
        self.admm_template().validate()
    }

    pub fn setting(&self) -> Setting {
        Setting::from_index(self.setting).expect("validated on assignment")
    }

    pub fn methods(&self) -> Vec<Weighting> {
        match self.method.as_str() {
            "balanced" => vec![Weighting::Balanced],
            "uniform" => vec![Weighting::Uniform],
            _ => vec![Weighting::Balanced, Weighting::Uniform],
        }
    }

    pub fn schema(&self) -> TripletSchema {
        TripletSchema {
            delimiter: self.delimiter,
            one_indexed: self.one_indexed,
            header: self.header,
        }
    }

    pub fn grid_rule(&self) -> GridRule {
        GridRule {
            beta_factors: self.beta_factors.clone(),
            mu_exponents: self.mu_exponents.clone(),
            balancing_pcts: self.pcts.clone(),
        }
    }

    pub fn weight_options(&self) -> WeightOptions {
        WeightOptions {
            max_iter: self.weight_max_iter,
            step_rule: StepRule::InvSqrt { step0: self.step0 },
            tol: self.weight_tol,
            window: self.weight_window,
            ..WeightOptions::default()
        }
    }

    fn admm_template(&self) -> AdmmConfig {
        AdmmConfig {
            rho: self.rho,
            tau: self.tau,
            max_iter: self.admm_max_iter,
            tol: self.admm_tol,
            paper_signs: self.admm_paper_signs,
            ..AdmmConfig::new(1.0, 0.0)
        }
    }

    /// Tuning options with `weighting` and `split_seed` left at defaults.
    pub fn tune_options(&self) -> TuneOptions {
        TuneOptions {
            solver: self.solver,
            val_frac: self.val_frac,
            kappa_grid: self.kappa.clone(),
            kappa_points: self.kappa_points,
            refine_steps: self.refine_steps,
            weight: self.weight_options(),
            pgd_rank: self.pgd_rank,
            pgd_max_iter: self.pgd_max_iter,
            pgd_tol: self.pgd_tol,
            pgd_radius: self.radius,
            pgd_momentum: self.momentum,
            warm_start: self.warm_start,
            admm: self.admm_template(),
            rank_tol: self.rank_tol,
            ..TuneOptions::default()
        }
    }
}
