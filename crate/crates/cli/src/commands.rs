use std::fs;
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use quantfolio::household::{replicate_table, HouseholdConfig, LogBase};
use quantfolio::kelly::{default_grid, kelly_curve, KellyCurve};
use quantfolio::market::{validate, ConeConstraint, MarketModel};
use quantfolio::quantile::{self, deviation_rate, multi_time_objective, MultiTimeObjective};
use quantfolio::sim::{
    boundary_deviation_test, multi_time_perturbation_test, perturbation_test, richardson,
    simulate, PerturbationResult, Scheme, SimConfig,
};
use quantfolio::strategy::{Strategy, StrategySpec};

use crate::manifest::{digest_file, RunManifest};
use crate::output::{num, Sink, Table};

pub enum Failure {
    /// Input parsed but failed a model check (exit 2).
    Validation(String),
    Other(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Other(e.into())
    }
}

#[derive(Debug, Parser, Serialize)]
#[command(name = "quantfolio", version, about = "Quantile-maximizing portfolio selection")]
pub struct Cli {
    /// Seed for every random draw; a fresh one is drawn and recorded when omitted.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (falls back to QUANTFOLIO_THREADS). Results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum Command {
    /// Check the standing conditions on a market definition.
    Validate(ValidateArgs),
    /// Tabulate the constrained Kelly portfolio on a time grid.
    Kelly(KellyArgs),
    /// Dollar allocation of a strategy at (t, x).
    Allocate(StateArgs),
    /// Closed-form α-quantile of terminal wealth.
    Quantile(QuantileArgs),
    /// Medians of two strategies over a wealth grid.
    Compare(CompareArgs),
    /// Closed-form deviation rate of the α-quantile.
    Deviate(DeviateArgs),
    /// Monte Carlo summary of wealth at the record times.
    Simulate(SimulateArgs),
    /// Finite-ε perturbation test with common random numbers.
    Perturb(PerturbArgs),
    /// Deviation from the floor of the equilibrium strategy.
    Boundary(BoundaryArgs),
    /// Household portfolio-share regression table.
    Household(HouseholdArgs),
    /// Weighted multi-date quantile objective and its perturbation test.
    Multitime(MultitimeArgs),
    /// Re-run a manifest and compare output digests.
    Replay(ReplayArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct MarketArgs {
    /// Market definition (JSON); defaults to one asset with b = 0.08, σ = 0.2, T = 1.
    #[arg(long)]
    pub market: Option<PathBuf>,
    /// Spacing of the time grid for Kelly solutions and validation.
    #[arg(long, default_value_t = 1.0 / 252.0)]
    pub grid_step: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ValidateArgs {
    #[command(flatten)]
    pub market: MarketArgs,
    /// Write the full grid report (JSON) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct KellyArgs {
    #[command(flatten)]
    pub market: MarketArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct StateArgs {
    #[command(flatten)]
    pub market: MarketArgs,
    /// Strategy definition: a JSON file or inline JSON.
    #[arg(long)]
    pub strategy: String,
    #[arg(long, default_value_t = 0.0)]
    pub t: f64,
    #[arg(long, default_value_t = 100.0)]
    pub x: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct QuantileArgs {
    #[command(flatten)]
    pub state: StateArgs,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Evaluation date; defaults to the market horizon.
    #[arg(long)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[command(flatten)]
    pub market: MarketArgs,
    /// Two strategy definitions.
    #[arg(long, num_args = 2, required = true)]
    pub strategies: Vec<String>,
    /// Wealth grid `x0:x1:n`.
    #[arg(long)]
    pub grid: String,
    #[arg(long, default_value_t = 0.0)]
    pub t: f64,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DeviateArgs {
    #[command(flatten)]
    pub state: StateArgs,
    /// Deviation in dollars, comma separated, one entry per asset.
    #[arg(long, allow_hyphen_values = true)]
    pub pi: String,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeArg {
    Exact,
    LogEuler,
    Euler,
}

#[derive(Debug, Args, Serialize)]
pub struct SimArgs {
    #[arg(long, default_value_t = 100_000)]
    pub paths: usize,
    #[arg(long, value_enum, default_value_t = SchemeArg::Exact)]
    pub scheme: SchemeArg,
    /// Step for the Euler schemes, in years.
    #[arg(long, default_value_t = 1.0 / 252.0)]
    pub step: f64,
    #[arg(long)]
    pub antithetic: bool,
    #[arg(long)]
    pub bootstrap: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub state: StateArgs,
    #[command(flatten)]
    pub sim: SimArgs,
    /// Record times, comma separated; defaults to the horizon.
    #[arg(long)]
    pub record: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub state: StateArgs,
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub pi: String,
    /// Window lengths, comma separated.
    #[arg(long, default_value = "0.04,0.02,0.01")]
    pub eps: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct BoundaryArgs {
    #[command(flatten)]
    pub market: MarketArgs,
    #[command(flatten)]
    pub sim: SimArgs,
    #[arg(long, default_value_t = 60.0)]
    pub xi: f64,
    #[arg(long, default_value_t = 0.5)]
    pub t: f64,
    #[arg(long, default_value_t = 0.01)]
    pub eps: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBaseArg {
    Natural,
    Binary,
}

#[derive(Debug, Args, Serialize)]
pub struct HouseholdArgs {
    #[arg(long, default_value = "0.4,0.5,0.6")]
    pub beta: String,
    #[arg(long, default_value = "0.0065,0.0070,0.0075")]
    pub varpi: String,
    #[arg(long, default_value_t = 2000)]
    pub reps: usize,
    #[arg(long, default_value_t = 3000)]
    pub households: usize,
    /// Years of age past the youngest cohort, comma separated.
    #[arg(long, default_value = "0,10,20,30,40")]
    pub ages: String,
    #[arg(long, default_value_t = 0.04)]
    pub mu: f64,
    #[arg(long, default_value_t = 61811.8)]
    pub xbar0: f64,
    #[arg(long, default_value_t = 0.0569)]
    pub rho: f64,
    #[arg(long, value_enum, default_value_t = LogBaseArg::Binary)]
    pub log_base: LogBaseArg,
    /// Emit one row per cell with full-precision mean and std.
    #[arg(long)]
    pub long: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct MultitimeArgs {
    #[command(flatten)]
    pub state: StateArgs,
    #[command(flatten)]
    pub sim: SimArgs,
    /// Evaluation dates, comma separated; the last must be the horizon.
    #[arg(long, default_value = "0.5,1")]
    pub dates: String,
    /// Weight rows separated by `;`, entries by `,`. A single row is reused
    /// and renormalized over the remaining dates.
    #[arg(long, default_value = "0.5,0.5")]
    pub weights: String,
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Deviation for a Monte Carlo perturbation test.
    #[arg(long, allow_hyphen_values = true)]
    pub pi: Option<String>,
    #[arg(long, default_value_t = 0.01)]
    pub eps: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
}

/// Run a parsed command line. `argv` is recorded in manifests.
pub fn run(cli: Cli, argv: &[String]) -> Result<(), Failure> {
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => std::env::var("QUANTFOLIO_THREADS")
            .ok()
            .map(|v| v.parse::<usize>())
            .transpose()
            .context("QUANTFOLIO_THREADS must be a positive integer")?,
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(anyhow!("thread count must be positive").into());
        }
        // fails only if a pool already exists, as in a replay
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = cli.seed.unwrap_or_else(rand::random);
    let resolved_argv = pin_seed(argv, cli.seed, seed);
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);

    let written = match &cli.command {
        Command::Validate(a) => cmd_validate(a)?,
        Command::Kelly(a) => cmd_kelly(a)?,
        Command::Allocate(a) => cmd_allocate(a)?,
        Command::Quantile(a) => cmd_quantile(a)?,
        Command::Compare(a) => cmd_compare(a)?,
        Command::Deviate(a) => cmd_deviate(a)?,
        Command::Simulate(a) => cmd_simulate(a, seed)?,
        Command::Perturb(a) => cmd_perturb(a, seed)?,
        Command::Boundary(a) => cmd_boundary(a, seed)?,
        Command::Household(a) => cmd_household(a, seed)?,
        Command::Multitime(a) => cmd_multitime(a, seed)?,
        Command::Replay(a) => return cmd_replay(a),
    };

    if let Some(out) = written {
        let manifest = RunManifest {
            command: command_name(&cli.command).into(),
            argv: argv.to_vec(),
            resolved_argv,
            parameters: serde_json::to_value(&cli.command)?,
            seed,
            threads,
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix,
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            outputs: vec![digest_file(&out)?],
        };
        manifest.write(&out)?;
    }
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Validate(_) => "validate",
        Command::Kelly(_) => "kelly",
        Command::Allocate(_) => "allocate",
        Command::Quantile(_) => "quantile",
        Command::Compare(_) => "compare",
        Command::Deviate(_) => "deviate",
        Command::Simulate(_) => "simulate",
        Command::Perturb(_) => "perturb",
        Command::Boundary(_) => "boundary",
        Command::Household(_) => "household",
        Command::Multitime(_) => "multitime",
        Command::Replay(_) => "replay",
    }
}

fn pin_seed(argv: &[String], given: Option<u64>, seed: u64) -> Vec<String> {
    let mut out = argv.to_vec();
    if given.is_none() {
        out.push("--seed".into());
        out.push(seed.to_string());
    }
    out
}

fn load_market(args: &MarketArgs) -> Result<MarketModel> {
    match &args.market {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading market {}", path.display()))?;
            MarketModel::from_json(&text).with_context(|| format!("market {}", path.display()))
        }
        None => Ok(MarketModel::constant(
            1.0,
            &[0.08],
            DMatrix::from_element(1, 1, 0.2),
            ConeConstraint::unconstrained(1),
        )?),
    }
}

fn load_kelly(args: &MarketArgs) -> Result<KellyCurve> {
    let market = load_market(args)?;
    if !(args.grid_step > 0.0) {
        bail!("--grid-step must be positive");
    }
    Ok(kelly_curve(&market, &default_grid(&market, args.grid_step))?)
}

fn load_strategy(source: &str, market: &MarketModel, x0: f64) -> Result<Strategy> {
    let text = if source.trim_start().starts_with('{') {
        source.to_string()
    } else {
        fs::read_to_string(source).with_context(|| format!("reading strategy {source}"))?
    };
    let spec = StrategySpec::from_json(&text).with_context(|| format!("strategy {source}"))?;
    Ok(spec.build(market, x0)?)
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("bad {what} entry {v:?}"))
        })
        .collect()
}

fn parse_vector(s: &str, assets: usize) -> Result<DVector<f64>> {
    let v = parse_list(s, "--pi")?;
    if v.len() != assets {
        bail!("--pi has {} entries, market has {assets} assets", v.len());
    }
    Ok(DVector::from_vec(v))
}

fn sim_config(args: &SimArgs, seed: u64) -> SimConfig {
    let scheme = match args.scheme {
        SchemeArg::Exact => Scheme::Exact,
        SchemeArg::LogEuler => Scheme::LogEuler { step: args.step },
        SchemeArg::Euler => Scheme::Euler { step: args.step },
    };
    let mut cfg = SimConfig::new(args.paths, seed)
        .with_scheme(scheme)
        .with_antithetic(args.antithetic);
    if let Some(b) = args.bootstrap {
        cfg.bootstrap_resamples = b;
    }
    cfg
}

fn cmd_validate(a: &ValidateArgs) -> Result<Option<PathBuf>, Failure> {
    let market = load_market(&a.market)?;
    let report = validate(&market, a.market.grid_step)?;
    let written = match &a.out {
        Some(p) => Sink::File(p.clone()).emit(&(serde_json::to_string_pretty(&report)? + "\n"))?,
        None => None,
    };
    match &report.first_failure {
        None => {
            println!("ok: {} grid points checked", report.points.len());
            Ok(written)
        }
        Some(f) => {
            Err(Failure::Validation(format!(
                "validation failed at t = {}{}: {}",
                num(f.t),
                if f.left_limit { " (left limit)" } else { "" },
                f.violation
            )))
        }
    }
}

fn cmd_kelly(a: &KellyArgs) -> Result<Option<PathBuf>, Failure> {
    let kelly = load_kelly(&a.market)?;
    let market = kelly.market();
    let m = market.assets();
    let mut header = vec!["t".to_string()];
    header.extend((1..=m).map(|i| format!("v_star_{i}")));
    header.extend(["b_dot_v", "sigma_v_norm_sq", "active_set"].map(String::from));
    let mut table = Table::new(&header)?;
    for (t, sol) in kelly.grid().iter().zip(kelly.solutions()) {
        let mut row = vec![num(*t)];
        row.extend(sol.v_star.iter().map(|v| num(*v)));
        row.push(num(market.b_at(*t).dot(&sol.v_star)));
        row.push(num(kelly.squared_vol(*t)));
        row.push(
            sol.active_set
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(";"),
        );
        table.row(&row)?;
    }
    Ok(Sink::from_option(a.out.as_deref()).emit(&table.finish()?)?)
}

fn cmd_allocate(a: &StateArgs) -> Result<Option<PathBuf>, Failure> {
    let kelly = load_kelly(&a.market)?;
    let strategy = load_strategy(&a.strategy, kelly.market(), a.x)?;
    let pi = strategy.allocation(&kelly, a.t, a.x)?;
    let mut header = vec!["t".to_string(), "x".to_string()];
    header.extend((1..=pi.len()).map(|i| format!("pi_{i}")));
    let mut table = Table::new(&header)?;
    let mut row = vec![num(a.t), num(a.x)];
    row.extend(pi.iter().map(|v| num(*v)));
    table.row(&row)?;
    Sink::Stdout.emit(&table.finish()?)?;
    Ok(None)
}

fn cmd_quantile(a: &QuantileArgs) -> Result<Option<PathBuf>, Failure> {
    let s = &a.state;
    let kelly = load_kelly(&s.market)?;
    let strategy = load_strategy(&s.strategy, kelly.market(), s.x)?;
    let horizon = a.horizon.unwrap_or(kelly.horizon());
    let g = quantile::quantile(&strategy, &kelly, s.t, s.x, a.alpha, horizon)?;
    println!("{}", num(g));
    Ok(None)
}

fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let [x0, x1, n] = parts[..] else {
        bail!("--grid must look like x0:x1:n");
    };
    let (x0, x1): (f64, f64) = (x0.parse()?, x1.parse()?);
    let n: usize = n.parse()?;
    if n == 0 {
        bail!("--grid needs at least one point");
    }
    if n == 1 {
        return Ok(vec![x0]);
    }
    Ok((0..n)
        .map(|i| x0 + (x1 - x0) * i as f64 / (n - 1) as f64)
        .collect())
}

fn cmd_compare(a: &CompareArgs) -> Result<Option<PathBuf>, Failure> {
    let kelly = load_kelly(&a.market)?;
    let xs = parse_grid(&a.grid)?;
    let mut table = Table::new(["x", "median_a", "median_b", "winner"])?;
    let horizon = kelly.horizon();
    for x in xs {
        let sa = load_strategy(&a.strategies[0], kelly.market(), x)?;
        let sb = load_strategy(&a.strategies[1], kelly.market(), x)?;
        let qa = quantile::quantile(&sa, &kelly, a.t, x, a.alpha, horizon)?;
        let qb = quantile::quantile(&sb, &kelly, a.t, x, a.alpha, horizon)?;
        let winner = if qa > qb {
            "a"
        } else if qb > qa {
            "b"
        } else {
            "tie"
        };
        table.row([num(x), num(qa), num(qb), winner.into()])?;
    }
    Ok(Sink::from_option(a.out.as_deref()).emit(&table.finish()?)?)
}

fn cmd_deviate(a: &DeviateArgs) -> Result<Option<PathBuf>, Failure> {
    let s = &a.state;
    let kelly = load_kelly(&s.market)?;
    let strategy = load_strategy(&s.strategy, kelly.market(), s.x)?;
    let pi = parse_vector(&a.pi, kelly.market().assets())?;
    let r = deviation_rate(&strategy, a.alpha, s.t, s.x, &pi, &kelly)?;
    let mut table = Table::new(["rate", "phi_hat", "phi_pi", "f_y", "quantile"])?;
    table.row([r.value, r.phi_hat, r.phi_pi, r.f_y, r.quantile].map(num))?;
    Sink::Stdout.emit(&table.finish()?)?;
    Ok(None)
}

fn cmd_simulate(a: &SimulateArgs, seed: u64) -> Result<Option<PathBuf>, Failure> {
    let s = &a.state;
    let kelly = load_kelly(&s.market)?;
    let strategy = load_strategy(&s.strategy, kelly.market(), s.x)?;
    let mut cfg = sim_config(&a.sim, seed);
    if let Some(r) = &a.record {
        cfg = cfg.with_record_times(parse_list(r, "--record")?);
    }
    let batch = simulate(&strategy, &kelly, s.t, s.x, &cfg)?;
    let mut table = Table::new(["time", "mean", "median", "q05", "q95", "min", "breach_fraction"])?;
    for (i, t) in batch.record_times.iter().enumerate() {
        let col = batch.at(i);
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let min = col.iter().copied().fold(f64::INFINITY, f64::min);
        table.row([
            num(*t),
            num(mean),
            num(batch.quantile(i, 0.5)?),
            num(batch.quantile(i, 0.05)?),
            num(batch.quantile(i, 0.95)?),
            num(min),
            num(batch.breach_fraction()),
        ])?;
    }
    Ok(Sink::from_option(a.out.as_deref()).emit(&table.finish()?)?)
}

const PERTURB_HEADER: [&str; 8] = [
    "kind",
    "eps",
    "q_base",
    "q_perturbed",
    "diff",
    "stderr",
    "rate",
    "z",
];

fn perturb_row(table: &mut Table, r: &PerturbationResult) -> Result<()> {
    table.row([
        "finite".to_string(),
        num(r.eps),
        num(r.q_base),
        num(r.q_perturbed),
        num(r.diff),
        num(r.stderr),
        num(r.rate_estimate),
        num(r.z_score()),
    ])
}

fn cmd_perturb(a: &PerturbArgs, seed: u64) -> Result<Option<PathBuf>, Failure> {
    let s = &a.state;
    let kelly = load_kelly(&s.market)?;
    let strategy = load_strategy(&s.strategy, kelly.market(), s.x)?;
    let pi = parse_vector(&a.pi, kelly.market().assets())?;
    let eps = parse_list(&a.eps, "--eps")?;
    let cfg = sim_config(&a.sim, seed);
    let results = perturbation_test(&strategy, a.alpha, s.t, s.x, &pi, &eps, &kelly, &cfg)?;
    let mut table = Table::new(PERTURB_HEADER)?;
    for r in &results {
        perturb_row(&mut table, r)?;
    }
    if results.len() >= 2 {
        let ex = richardson(&results)?;
        let z = if ex.stderr > 0.0 { ex.rate / ex.stderr } else { f64::NAN };
        table.row([
            "extrapolated".to_string(),
            num(0.0),
            String::new(),
            String::new(),
            String::new(),
            num(ex.stderr),
            num(ex.rate),
            num(z),
        ])?;
    }
    Ok(Sink::from_option(a.out.as_deref()).emit(&table.finish()?)?)
}

fn cmd_boundary(a: &BoundaryArgs, seed: u64) -> Result<Option<PathBuf>, Failure> {
    let kelly = load_kelly(&a.market)?;
    let cfg = sim_config(&a.sim, seed);
    let r = boundary_deviation_test(a.xi, a.t, a.eps, &kelly, &cfg)?;
    let mut table = Table::new(PERTURB_HEADER)?;
    perturb_row(&mut table, &r)?;
    Ok(Sink::from_option(a.out.as_deref()).emit(&table.finish()?)?)
}

fn cmd_household(a: &HouseholdArgs, seed: u64) -> Result<Option<PathBuf>, Failure> {
    let base = HouseholdConfig {
        num_households: a.households,
        xbar0: a.xbar0,
        rho_disp: a.rho,
        mu: a.mu,
        ages_t: parse_list(&a.ages, "--ages")?,
        replications: a.reps,
        seed,
        log_base: match a.log_base {
            LogBaseArg::Natural => LogBase::Natural,
            LogBaseArg::Binary => LogBase::Binary,
        },
        ..HouseholdConfig::default()
    };
    let table = replicate_table(
        &parse_list(&a.beta, "--beta")?,
        &parse_list(&a.varpi, "--varpi")?,
        &base,
    )?;
    let text = if a.long {
        table.to_long_csv()
    } else {
        table.to_wide_csv()
    };
    Ok(Sink::from_option(a.out.as_deref()).emit(&text)?)
}

fn parse_objective(dates: &str, weights: &str) -> Result<MultiTimeObjective> {
    let dates = parse_list(dates, "--dates")?;
    let rows: Vec<Vec<f64>> = weights
        .split(';')
        .map(|r| parse_list(r, "--weights"))
        .collect::<Result<_>>()?;
    Ok(if rows.len() == 1 {
        MultiTimeObjective::uniform_row(dates, &rows[0])?
    } else {
        MultiTimeObjective::new(dates, rows)?
    })
}

fn cmd_multitime(a: &MultitimeArgs, seed: u64) -> Result<Option<PathBuf>, Failure> {
    let s = &a.state;
    let kelly = load_kelly(&s.market)?;
    let strategy = load_strategy(&s.strategy, kelly.market(), s.x)?;
    let obj = parse_objective(&a.dates, &a.weights)?;
    let j = multi_time_objective(&obj, &strategy, &kelly, s.t, s.x, a.alpha)?;
    let mut table = Table::new(["objective", "eps", "j_base", "j_perturbed", "diff", "stderr", "z"])?;
    match &a.pi {
        None => table.row([num(j), String::new(), String::new(), String::new(), String::new(), String::new(), String::new()])?,
        Some(pi) => {
            let pi = parse_vector(pi, kelly.market().assets())?;
            let cfg = sim_config(&a.sim, seed);
            let r = multi_time_perturbation_test(&obj, &strategy, a.alpha, s.t, s.x, &pi, a.eps, &kelly, &cfg)?;
            table.row([
                num(j),
                num(r.eps),
                num(r.q_base),
                num(r.q_perturbed),
                num(r.diff),
                num(r.stderr),
                num(r.z_score()),
            ])?;
        }
    }
    Ok(Sink::from_option(a.out.as_deref()).emit(&table.finish()?)?)
}

fn cmd_replay(a: &ReplayArgs) -> Result<(), Failure> {
    let recorded = RunManifest::read(&a.manifest)?;
    let cli = Cli::try_parse_from(&recorded.resolved_argv)
        .map_err(|e| anyhow!("manifest arguments no longer parse: {e}"))?;
    if matches!(cli.command, Command::Replay(_)) {
        return Err(anyhow!("a manifest cannot replay another replay").into());
    }
    run(cli, &recorded.resolved_argv)?;
    let mut mismatched = Vec::new();
    for out in &recorded.outputs {
        let now = digest_file(&out.path)?;
        if now.sha256 != out.sha256 {
            mismatched.push(out.path.display().to_string());
        }
    }
    if mismatched.is_empty() {
        println!("replay reproduced {} output(s)", recorded.outputs.len());
        Ok(())
    } else {
        Err(Failure::Validation(format!(
            "replay changed output(s): {}",
            mismatched.join(", ")
        )))
    }
}
