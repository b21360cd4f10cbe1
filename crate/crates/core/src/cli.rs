//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiments::{
    generate_instance_with, run_replications, tune_and_fit, EvaluationReport, Grids, ReplicationConfig, Setting,
    TuningData, Weighting,
};
use crate::io::{
    self, load_triplets, ratings_to_matrix, read_dense_csv, read_mask_csv, write_dense_csv, write_json_report,
    write_mask_csv, TripletDataset,
};
use crate::linalg::DenseMatrix;
use crate::mask::Mask;
use crate::weights::{balancing_profile_with_solutions, default_kappa_grid, select_indices_by_percentage};

#[derive(Parser, Debug)]
#[command(name = "balanced-mc", version, about = "Matrix completion with balancing weights")]
#[command(arg_required_else_help = true)]
struct Cli {
    /// key = value configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra `key=value` overrides, applied after the file and before flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Draw a synthetic instance and write it as CSV files.
    Simulate(SimulateArgs),
    /// Balancing weights and profile for a mask.
    Weights(WeightsArgs),
    /// Tune and fit the estimator on a dense instance or triplet data.
    Fit(FitArgs),
    /// Metrics of a fitted matrix.
    Evaluate(EvaluateArgs),
    /// Replicated simulation summary as CSV.
    ReproduceTable(TableArgs),
    /// Triplet ratings to dense `y.csv` and `mask.csv`.
    Convert(ConvertArgs),
}

#[derive(Args, Debug, Default)]
struct DesignFlags {
    #[arg(long)]
    setting: Option<u8>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    n1: Option<usize>,
    #[arg(long)]
    n2: Option<usize>,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// `expected` or `realized`.
    #[arg(long)]
    calibration: Option<String>,
}

#[derive(Args, Debug, Default)]
struct TuneFlags {
    /// `pgd` or `admm`.
    #[arg(long)]
    solver: Option<String>,
    /// `balanced`, `uniform` or `both`.
    #[arg(long)]
    method: Option<String>,
    /// Comma-separated absolute β grid.
    #[arg(long, allow_hyphen_values = true)]
    beta: Option<String>,
    /// Comma-separated absolute μ grid.
    #[arg(long, allow_hyphen_values = true)]
    mu: Option<String>,
    /// Comma-separated balancing percentages.
    #[arg(long)]
    pcts: Option<String>,
    #[arg(long)]
    pgd_rank: Option<usize>,
    #[arg(long)]
    admm_paper_signs: bool,
}

#[derive(Args, Debug, Default)]
struct SchemaFlags {
    /// `comma`, `tab` or `whitespace`.
    #[arg(long)]
    delimiter: Option<String>,
    /// Indices start at 0 instead of 1.
    #[arg(long)]
    zero_indexed: bool,
    /// Skip the first line.
    #[arg(long)]
    header: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    design: DesignFlags,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct WeightsArgs {
    #[arg(long)]
    mask: PathBuf,
    /// Number of log-spaced κ′ values.
    #[arg(long)]
    grid_points: Option<usize>,
    /// Comma-separated κ′ grid (overrides --grid-points).
    #[arg(long)]
    kappa: Option<String>,
    #[arg(long)]
    pcts: Option<String>,
    /// Profile CSV; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for the weights selected at each percentage.
    #[arg(long)]
    weights_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Directory written by `simulate` or `convert`.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    y: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Training triplets.
    #[arg(long)]
    train: Option<PathBuf>,
    /// Validation triplets; a random split of the training entries otherwise.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long)]
    n_rows: Option<usize>,
    #[arg(long)]
    n_cols: Option<usize>,
    #[command(flatten)]
    tune: TuneFlags,
    #[command(flatten)]
    schema: SchemaFlags,
    #[arg(long)]
    seed: Option<u64>,
    /// Fitted matrix CSV; a JSON report is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Fitted matrix CSV.
    #[arg(long)]
    fit: PathBuf,
    /// Directory with `a_star.csv` and `mask.csv`.
    #[arg(long)]
    instance: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Held-out rating triplets.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[command(flatten)]
    schema: SchemaFlags,
    /// JSON report; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TableArgs {
    #[command(flatten)]
    design: DesignFlags,
    #[command(flatten)]
    tune: TuneFlags,
    #[arg(long)]
    reps: Option<usize>,
    /// Summary CSV; standard output when absent. A JSON report with every
    /// replicate is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Aligned text table.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ConvertArgs {
    #[arg(long)]
    triplets: PathBuf,
    #[arg(long)]
    n_rows: Option<usize>,
    #[arg(long)]
    n_cols: Option<usize>,
    #[command(flatten)]
    schema: SchemaFlags,
    #[arg(long)]
    out: PathBuf,
}

/// Error raised while assembling the configuration from flags (exit code 2).
struct Usage(Error);

type Overrides = Vec<(&'static str, String)>;

fn push<T: ToString>(o: &mut Overrides, key: &'static str, v: &Option<T>) {
    if let Some(v) = v {
        o.push((key, v.to_string()));
    }
}

impl DesignFlags {
    fn overrides(&self, o: &mut Overrides) {
        push(o, "setting", &self.setting);
        push(o, "snr", &self.snr);
        push(o, "n1", &self.n1);
        push(o, "n2", &self.n2);
        push(o, "rank", &self.rank);
        push(o, "seed", &self.seed);
        push(o, "calibration", &self.calibration);
    }
}

impl TuneFlags {
    fn overrides(&self, o: &mut Overrides) {
        push(o, "solver", &self.solver);
        push(o, "method", &self.method);
        push(o, "beta", &self.beta);
        push(o, "mu", &self.mu);
        push(o, "pcts", &self.pcts);
        push(o, "pgd_rank", &self.pgd_rank);
        if self.admm_paper_signs {
            o.push(("admm_paper_signs", "true".into()));
        }
    }
}

impl SchemaFlags {
    fn overrides(&self, o: &mut Overrides) {
        push(o, "delimiter", &self.delimiter);
        if self.zero_indexed {
            o.push(("one_indexed", "false".into()));
        }
        if self.header {
            o.push(("header", "true".into()));
        }
    }
}

fn build_config(cli: &Cli) -> std::result::Result<RunConfig, Usage> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(Usage)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Usage(Error::invalid(format!("--set expects KEY=VALUE, got {kv:?}"))))?;
        cfg.apply(k.trim(), v).map_err(Usage)?;
    }
    let mut o = Overrides::new();
    match &cli.command {
        Command::Simulate(a) => a.design.overrides(&mut o),
        Command::Weights(a) => {
            push(&mut o, "kappa_points", &a.grid_points);
            push(&mut o, "kappa", &a.kappa);
            push(&mut o, "pcts", &a.pcts);
        }
        Command::Fit(a) => {
            a.tune.overrides(&mut o);
            a.schema.overrides(&mut o);
            push(&mut o, "seed", &a.seed);
        }
        Command::Evaluate(a) => a.schema.overrides(&mut o),
        Command::ReproduceTable(a) => {
            a.design.overrides(&mut o);
            a.tune.overrides(&mut o);
            push(&mut o, "reps", &a.reps);
        }
        Command::Convert(a) => a.schema.overrides(&mut o),
    }
    for (k, v) in o {
        cfg.apply(k, &v).map_err(Usage)?;
    }
    cfg.validate().map_err(Usage)?;
    Ok(cfg)
}

/// Runs the command line and returns the process exit code: 0 on success,
/// 2 on usage errors, 1 on runtime errors.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match build_config(&cli) {
        Ok(c) => c,
        Err(Usage(e)) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match run(&cli.command, &cfg) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a, cfg),
        Command::Weights(a) => weights(a, cfg),
        Command::Fit(a) => fit(a, cfg),
        Command::Evaluate(a) => evaluate(a, cfg),
        Command::ReproduceTable(a) => reproduce_table(a, cfg),
        Command::Convert(a) => convert(a, cfg),
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Serialize)]
struct InstanceSummary {
    setting: u8,
    snr: f64,
    sigma_eps: f64,
    observed: usize,
    files: [&'static str; 4],
}

fn simulate(a: &SimulateArgs, cfg: &RunConfig) -> Result<()> {
    let inst = generate_instance_with(cfg.n1, cfg.n2, cfg.rank, cfg.setting(), cfg.snr, cfg.seed, cfg.calibration)?;
    fs::create_dir_all(&a.out)?;
    write_dense_csv(a.out.join("a_star.csv"), &inst.a_star)?;
    write_dense_csv(a.out.join("pi.csv"), &inst.pi)?;
    write_dense_csv(a.out.join("y.csv"), &inst.y)?;
    write_mask_csv(a.out.join("mask.csv"), &inst.mask)?;
    let summary = InstanceSummary {
        setting: inst.setting.index(),
        snr: inst.snr,
        sigma_eps: inst.sigma_eps,
        observed: inst.mask.count(),
        files: ["a_star.csv", "pi.csv", "y.csv", "mask.csv"],
    };
    write_json_report(a.out.join("instance.json"), cfg, Some(cfg.seed), &summary)
}

/// Reads back a directory written by [`simulate`].
pub fn read_instance(dir: &Path, cfg: &RunConfig) -> Result<crate::experiments::SyntheticInstance> {
    let a_star = read_dense_csv(dir.join("a_star.csv"))?;
    let pi = read_dense_csv(dir.join("pi.csv"))?;
    let y = read_dense_csv(dir.join("y.csv"))?;
    let mask = read_mask_csv(dir.join("mask.csv"))?;
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("instance.json"))?)?;
    let get = |k: &str| meta["result"][k].as_f64();
    let setting = get("setting").map(|s| s as u8).unwrap_or(cfg.setting);
    Ok(crate::experiments::SyntheticInstance {
        rank: meta["config"]["rank"].as_u64().map(|r| r as usize).unwrap_or(cfg.rank),
        a_star,
        pi,
        y,
        mask,
        seed: meta["seed"].as_u64().unwrap_or(cfg.seed),
        setting: Setting::from_index(setting)?,
        snr: get("snr").unwrap_or(cfg.snr),
        sigma_eps: get("sigma_eps").unwrap_or(f64::NAN),
    })
}

fn weights(a: &WeightsArgs, cfg: &RunConfig) -> Result<()> {
    let mask = read_mask_csv(&a.mask)?;
    let grid = cfg
        .kappa
        .clone()
        .unwrap_or_else(|| default_kappa_grid(mask.nrows(), mask.ncols(), cfg.kappa_points));
    let (profile, sols) = balancing_profile_with_solutions(&mask, &grid, &cfg.weight_options())?;
    let pcts = profile.percentages();
    let mut csv = String::from("kappa_prime,h_value,frob_tw,percentage,iterations,converged\n");
    for ((p, s), pct) in profile.points.iter().zip(&sols).zip(&pcts) {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.kappa_prime, p.h_value, p.frob_tw, pct, s.iterations, s.converged
        ));
    }
    emit(a.out.as_deref(), &csv)?;
    let idx = select_indices_by_percentage(&profile, &cfg.pcts)?;
    if let Some(dir) = &a.weights_dir {
        fs::create_dir_all(dir)?;
        for (&target, &k) in cfg.pcts.iter().zip(&idx) {
            write_dense_csv(dir.join(format!("weights_{}.csv", (target * 100.0).round())), &sols[k].weights)?;
        }
    }
    if let Some(out) = &a.out {
        #[derive(Serialize)]
        struct Selected {
            target: f64,
            kappa_prime: f64,
            percentage: f64,
        }
        let selected: Vec<Selected> = cfg
            .pcts
            .iter()
            .zip(&idx)
            .map(|(&target, &k)| Selected {
                target,
                kappa_prime: sols[k].kappa_prime,
                percentage: pcts[k],
            })
            .collect();
        write_json_report(sidecar(out), cfg, Some(cfg.seed), &(&profile, selected))?;
    }
    Ok(())
}

fn load_split(path: &Path, cfg: &RunConfig) -> Result<Vec<crate::experiments::Rating>> {
    load_triplets(path, &cfg.schema())
}

#[derive(Serialize)]
struct FitReport<'a> {
    method: &'static str,
    chosen: &'a crate::experiments::ChosenParams,
    validation_rmse: f64,
    est_rank: usize,
    grid: &'a Grids,
}

fn fit(a: &FitArgs, cfg: &RunConfig) -> Result<()> {
    let (y, mask, validation) = if let Some(train) = &a.train {
        let train = load_split(train, cfg)?;
        let val = a.validation.as_ref().map(|p| load_split(p, cfg)).transpose()?;
        let (r, c) = TripletDataset::infer_shape(&[&train, val.as_deref().unwrap_or(&[])]);
        let ds = TripletDataset::new(a.n_rows.unwrap_or(r), a.n_cols.unwrap_or(c), train, val.unwrap_or_default(), vec![])?;
        let (y, mask) = ds.train_matrix()?;
        let val = (!ds.validation.is_empty()).then_some(ds.validation);
        (y, mask, val)
    } else {
        let (yp, mp) = match (&a.instance, &a.y, &a.mask) {
            (Some(d), _, _) => (d.join("y.csv"), d.join("mask.csv")),
            (None, Some(y), Some(m)) => (y.clone(), m.clone()),
            _ => return Err(Error::invalid("give --instance, --y with --mask, or --train")),
        };
        (read_dense_csv(yp)?, read_mask_csv(mp)?, None)
    };
    let method = match cfg.methods().as_slice() {
        [one] => *one,
        _ => Weighting::Balanced,
    };
    let mut grids = cfg.grid_rule().resolve_observed(&y, &mask)?;
    if let Some(b) = &cfg.beta {
        grids.beta = b.clone();
    }
    if let Some(m) = &cfg.mu {
        grids.mu = m.clone();
    }
    let opts = crate::experiments::TuneOptions {
        weighting: method,
        split_seed: cfg.seed,
        ..cfg.tune_options()
    };
    let out = tune_and_fit(
        TuningData {
            y: &y,
            mask: &mask,
            validation: validation.as_deref(),
        },
        &grids,
        &opts,
    )?;
    write_dense_csv(&a.out, &out.a_hat)?;
    let report = FitReport {
        method: method.label(),
        chosen: &out.chosen,
        validation_rmse: out.validation_rmse,
        est_rank: out.est_rank,
        grid: &grids,
    };
    write_json_report(sidecar(&a.out), cfg, Some(cfg.seed), &report)
}

fn evaluate(a: &EvaluateArgs, cfg: &RunConfig) -> Result<()> {
    let a_hat = read_dense_csv(&a.fit)?;
    let truth: Option<(DenseMatrix, Mask)> = match (&a.instance, &a.truth, &a.mask) {
        (Some(d), _, _) => Some((read_dense_csv(d.join("a_star.csv"))?, read_mask_csv(d.join("mask.csv"))?)),
        (None, Some(t), Some(m)) => Some((read_dense_csv(t)?, read_mask_csv(m)?)),
        (None, None, None) => None,
        _ => return Err(Error::invalid("--truth and --mask must be given together")),
    };
    let eval = a.eval.as_ref().map(|p| load_split(p, cfg)).transpose()?;
    if truth.is_none() && eval.is_none() {
        return Err(Error::invalid("nothing to evaluate against: give --instance, --truth/--mask or --eval"));
    }
    let report = EvaluationReport::compute(
        &a_hat,
        truth.as_ref().map(|(t, m)| (t, m)),
        eval.as_deref(),
        cfg.rank_tol,
    )?;
    let text = io::json_report(cfg, Some(cfg.seed), &report)?;
    emit(a.out.as_deref(), &text)
}

fn reproduce_table(a: &TableArgs, cfg: &RunConfig) -> Result<()> {
    let mut rc = ReplicationConfig::new(cfg.setting(), cfg.snr, cfg.reps, cfg.seed);
    rc.n1 = cfg.n1;
    rc.n2 = cfg.n2;
    rc.rank = cfg.rank;
    rc.solver = cfg.solver;
    rc.methods = cfg.methods();
    rc.grids = cfg.grid_rule();
    rc.calibration = cfg.calibration;
    rc.tune = cfg.tune_options();
    rc.fixed_beta = cfg.beta.clone();
    rc.fixed_mu = cfg.mu.clone();
    let table = run_replications(&rc)?;
    let csv = table.to_csv();
    emit(a.out.as_deref(), &csv)?;
    if let Some(out) = &a.out {
        write_json_report(sidecar(out), cfg, Some(cfg.seed), &table)?;
    }
    if let Some(t) = &a.table {
        fs::write(t, table.to_text())?;
    }
    Ok(())
}

fn convert(a: &ConvertArgs, cfg: &RunConfig) -> Result<()> {
    let ratings = load_split(&a.triplets, cfg)?;
    if ratings.is_empty() {
        return Err(Error::invalid("triplet file holds no ratings"));
    }
    let (r, c) = TripletDataset::infer_shape(&[&ratings]);
    let ds = TripletDataset::new(a.n_rows.unwrap_or(r), a.n_cols.unwrap_or(c), ratings, vec![], vec![])?;
    let (y, mask) = ratings_to_matrix(ds.n_rows, ds.n_cols, &ds.train)?;
    fs::create_dir_all(&a.out)?;
    write_dense_csv(a.out.join("y.csv"), &y)?;
    write_mask_csv(a.out.join("mask.csv"), &mask)?;
    #[derive(Serialize)]
    struct Converted {
        n_rows: usize,
        n_cols: usize,
        ratings: usize,
    }
    let summary = Converted {
        n_rows: ds.n_rows,
        n_cols: ds.n_cols,
        ratings: ds.train.len(),
    };
    write_json_report(a.out.join("convert.json"), cfg, Some(cfg.seed), &summary)
}
