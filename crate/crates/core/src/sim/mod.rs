//! Monte Carlo simulation of the wealth equation
//! `dX = πᵀ(b dt + σ dW)` under a strategy, or under a sequence of phases
//! (hold a fixed dollar position, then follow a strategy).
//!
//! All runs on the same time grid draw the same Brownian increments for
//! the same path index, which is what couples deviated and undeviated runs.

pub mod experiments;
pub mod rng;
pub mod stats;

pub use experiments::{
    boundary_deviation_test, log_utility_estimate, log_utility_scan, multi_time_perturbation_test,
    perturbation_test, richardson, PerturbationResult, RateExtrapolation,
};
pub use stats::{empirical_quantile, quantile_with_stderr, QuantileEstimate};

use crate::curve::merge_breakpoints;
use crate::kelly::KellyCurve;
use crate::normal;
use crate::quantile::QuantileError;
use crate::strategy::{
    naive_delta, precommitted_delta_with_variance, PreCommittedState, Strategy, StrategyError,
};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use rng::PathNormals;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Wealth is clamped this far above the floor after an Euler overshoot.
pub const BREACH_CLAMP: f64 = 1e-12;
/// Default distance from the horizon at which the naive multiplier is frozen.
pub const DEFAULT_NAIVE_TRUNCATION: f64 = 1e-4;
pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 200;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("the {scheme} scheme is not available for the {strategy} strategy")]
    SchemeUnavailable {
        strategy: &'static str,
        scheme: &'static str,
    },
    #[error("invalid simulation setup: {0}")]
    InvalidConfig(String),
    #[error("deviation violates the cone constraint (min slack {0})")]
    InfeasibleDeviation(f64),
    #[error("no samples")]
    EmptyBatch,
    #[error("quantile level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("{fraction} of paths ended at or below the floor")]
    FloorBreach { fraction: f64 },
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error(transparent)]
    Quantile(#[from] QuantileError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum Scheme {
    /// Exact transition laws (lognormal above the floor, closed-form
    /// pre-committed wealth). Exact in law when the coefficients are
    /// piecewise constant.
    Exact,
    /// Euler in `log(X − L)` for strategies with a floor `L`; arithmetic
    /// Euler for the rest.
    LogEuler { step: f64 },
    /// Arithmetic Euler; overshoots below a floor are clamped and counted.
    Euler { step: f64 },
}

impl Scheme {
    pub fn name(&self) -> &'static str {
        match self {
            Scheme::Exact => "exact",
            Scheme::LogEuler { .. } => "log_euler",
            Scheme::Euler { .. } => "euler",
        }
    }

    fn step(&self) -> Option<f64> {
        match *self {
            Scheme::Exact => None,
            Scheme::LogEuler { step } | Scheme::Euler { step } => Some(step),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub num_paths: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// Empty means the horizon only.
    pub record_times: Vec<f64>,
    pub antithetic: bool,
    pub naive_truncation: f64,
    /// Resamples for paired bootstrap standard errors.
    pub bootstrap_resamples: usize,
}

impl SimConfig {
    pub fn new(num_paths: usize, seed: u64) -> Self {
        Self {
            num_paths,
            seed,
            scheme: Scheme::Exact,
            record_times: Vec::new(),
            antithetic: false,
            naive_truncation: DEFAULT_NAIVE_TRUNCATION,
            bootstrap_resamples: DEFAULT_BOOTSTRAP_RESAMPLES,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_record_times(mut self, times: Vec<f64>) -> Self {
        self.record_times = times;
        self
    }

    pub fn with_antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }
}

/// What the investor does on one stretch of time.
#[derive(Debug, Clone, PartialEq)]
pub enum Rule<'a> {
    /// Hold a fixed dollar amount in each risky asset.
    Hold(DVector<f64>),
    Follow(&'a Strategy),
}

/// `rule` applies from the previous phase's end (or the start) until `until`.
#[derive(Debug, Clone, PartialEq)]
pub struct Phase<'a> {
    pub until: f64,
    pub rule: Rule<'a>,
}

/// Simulated wealth, one row per path, one column per record time.
#[derive(Debug, Clone, PartialEq)]
pub struct PathBatch {
    pub record_times: Vec<f64>,
    pub num_paths: usize,
    wealth: Vec<f64>,
    breached_paths: usize,
}

impl PathBatch {
    /// Wealth of every path at record time `index`.
    pub fn at(&self, index: usize) -> Vec<f64> {
        let r = self.record_times.len();
        self.wealth.iter().skip(index).step_by(r).copied().collect()
    }

    pub fn terminal(&self) -> Vec<f64> {
        self.at(self.record_times.len() - 1)
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let r = self.record_times.len();
        &self.wealth[p * r..(p + 1) * r]
    }

    pub fn breached_paths(&self) -> usize {
        self.breached_paths
    }

    pub fn breach_fraction(&self) -> f64 {
        self.breached_paths as f64 / self.num_paths.max(1) as f64
    }

    pub fn quantile(&self, index: usize, alpha: f64) -> Result<f64, SimError> {
        empirical_quantile(&self.at(index), alpha)
    }
}

/// Simulate `strategy` from `(t0, x0)` to the horizon.
pub fn simulate(
    strategy: &Strategy,
    kelly: &KellyCurve,
    t0: f64,
    x0: f64,
    config: &SimConfig,
) -> Result<PathBatch, SimError> {
    let phases = [Phase {
        until: kelly.horizon(),
        rule: Rule::Follow(strategy),
    }];
    simulate_plan(&phases, kelly, t0, x0, config, &[])
}

/// Per-interval update, with coefficients already folded in.
enum Step {
    /// `X += drift + load·ΔW`.
    Hold { drift: f64, load: DVector<f64> },
    /// `h = X − floor`, `h *= exp(drift + load·ΔW)`; with `absorb`, paths at
    /// or below the floor stay put.
    Log {
        floor: f64,
        absorb: bool,
        drift: f64,
        load: DVector<f64>,
    },
    /// `π = θ₀ + θ₁X`: `X += c0 + c1·X + (s0 + X·s1)·ΔW`.
    Affine {
        c0: f64,
        c1: f64,
        s0: DVector<f64>,
        s1: DVector<f64>,
        floor: Option<f64>,
    },
    PreCommittedExact {
        state: PreCommittedState,
        start: f64,
        v_start: f64,
        v_end: f64,
        load: DVector<f64>,
    },
    /// `π = Δ_pc(t, X)·v*(X − ξ)`, in `log(X − ξ)` or arithmetic form.
    PreCommittedEuler {
        state: PreCommittedState,
        v_start: f64,
        bv: f64,
        qq: f64,
        load: DVector<f64>,
        log: bool,
    },
}

struct Interval {
    dt: f64,
    step: Step,
    records: Vec<usize>,
}

/// Simulate consecutive phases starting at `(t0, x0)`. The time grid is
/// built from the phase ends, record times, coefficient breakpoints and
/// `extra_knots`, so two plans with the same knots share Brownian paths.
pub fn simulate_plan(
    phases: &[Phase<'_>],
    kelly: &KellyCurve,
    t0: f64,
    x0: f64,
    config: &SimConfig,
    extra_knots: &[f64],
) -> Result<PathBatch, SimError> {
    let horizon = kelly.horizon();
    check_config(phases, horizon, t0, x0, config)?;
    let record_times = if config.record_times.is_empty() {
        vec![horizon]
    } else {
        config.record_times.clone()
    };
    let knots = time_grid(phases, kelly, t0, config, &record_times, extra_knots);
    let intervals = build_intervals(phases, kelly, &knots, config, &record_times)?;
    let initial_records: Vec<usize> = record_times
        .iter()
        .enumerate()
        .filter(|(_, r)| (**r - t0).abs() <= 1e-12)
        .map(|(i, _)| i)
        .collect();

    let d = kelly.market().factors();
    let r = record_times.len();
    let mut wealth = vec![0.0; config.num_paths * r];
    let breached_paths = wealth
        .par_chunks_mut(r)
        .enumerate()
        .map(|(p, row)| {
            let mut normals = PathNormals::new(config.seed, p as u64, config.antithetic);
            run_path(&intervals, &initial_records, x0, d, &mut normals, row) as usize
        })
        .sum();
    Ok(PathBatch {
        record_times,
        num_paths: config.num_paths,
        wealth,
        breached_paths,
    })
}

fn check_config(
    phases: &[Phase<'_>],
    horizon: f64,
    t0: f64,
    x0: f64,
    config: &SimConfig,
) -> Result<(), SimError> {
    let bad = |msg: String| Err(SimError::InvalidConfig(msg));
    if config.num_paths == 0 {
        return bad("num_paths must be positive".into());
    }
    if !(t0 >= 0.0 && t0 < horizon) || !x0.is_finite() {
        return bad(format!("start ({t0}, {x0}) outside [0, {horizon}) x R"));
    }
    if let Some(step) = config.scheme.step() {
        if !(step > 0.0) {
            return bad(format!("step must be positive, got {step}"));
        }
    }
    if !(config.naive_truncation > 0.0) {
        return bad("naive truncation must be positive".into());
    }
    if let Some(r) = config
        .record_times
        .iter()
        .find(|r| !(**r >= t0 - 1e-12 && **r <= horizon + 1e-12))
    {
        return bad(format!("record time {r} outside [{t0}, {horizon}]"));
    }
    if phases.is_empty() {
        return bad("no phases".into());
    }
    let mut prev = t0;
    for ph in phases {
        if ph.until < prev {
            return bad("phase ends must be nondecreasing".into());
        }
        prev = ph.until;
    }
    if (prev - horizon).abs() > 1e-12 {
        return bad("the last phase must end at the horizon".into());
    }
    Ok(())
}

fn strategies<'a>(phases: &'a [Phase<'a>]) -> impl Iterator<Item = &'a Strategy> {
    phases.iter().filter_map(|p| match p.rule {
        Rule::Follow(s) => Some(s),
        Rule::Hold(_) => None,
    })
}

fn time_grid(
    phases: &[Phase<'_>],
    kelly: &KellyCurve,
    t0: f64,
    config: &SimConfig,
    record_times: &[f64],
    extra_knots: &[f64],
) -> Vec<f64> {
    let horizon = kelly.horizon();
    let mut knots = vec![t0, horizon];
    knots.extend(record_times);
    knots.extend(extra_knots);
    knots.extend(phases.iter().map(|p| p.until));
    knots.extend(kelly.market().coefficient_breakpoints());
    if !kelly.is_piecewise_constant() {
        knots.extend(kelly.grid());
    }
    for s in strategies(phases) {
        match s {
            Strategy::Naive { .. } => knots.push(horizon - config.naive_truncation),
            Strategy::ZeroInvestment { theta, .. } => knots.extend(theta.breakpoints()),
            Strategy::GeneralAffine(a) => knots.extend(a.breakpoints()),
            _ => {}
        }
    }
    knots.retain(|t| *t >= t0 && *t <= horizon);
    let knots = merge_breakpoints([&knots[..]]);
    match config.scheme.step() {
        None => knots,
        Some(step) => {
            let mut fine = vec![knots[0]];
            for w in knots.windows(2) {
                let n = (((w[1] - w[0]) / step) - 1e-9).ceil().max(1.0) as usize;
                let h = (w[1] - w[0]) / n as f64;
                fine.extend((1..n).map(|i| w[0] + h * i as f64));
                fine.push(w[1]);
            }
            fine
        }
    }
}

fn build_intervals(
    phases: &[Phase<'_>],
    kelly: &KellyCurve,
    knots: &[f64],
    config: &SimConfig,
    record_times: &[f64],
) -> Result<Vec<Interval>, SimError> {
    let pairs: Vec<(f64, f64)> = knots.windows(2).map(|w| (w[0], w[1])).collect();
    pairs
        .par_iter()
        .map(|&(a, b)| {
            let mid = 0.5 * (a + b);
            let rule = &phases
                .iter()
                .find(|p| mid < p.until)
                .unwrap_or(&phases[phases.len() - 1])
                .rule;
            let records = record_times
                .iter()
                .enumerate()
                .filter(|(_, r)| (**r - b).abs() <= 1e-12)
                .map(|(i, _)| i)
                .collect();
            Ok(Interval {
                dt: b - a,
                step: build_step(rule, kelly, a, b, config)?,
                records,
            })
        })
        .collect()
}

/// Coefficient samples for one interval: midpoint for the exact scheme,
/// left end for the Euler schemes.
struct Coefficients {
    b: DVector<f64>,
    sigma_t: DMatrix<f64>,
}

fn build_step(
    rule: &Rule<'_>,
    kelly: &KellyCurve,
    a: f64,
    b: f64,
    config: &SimConfig,
) -> Result<Step, SimError> {
    let market = kelly.market();
    let dt = b - a;
    let exact = config.scheme == Scheme::Exact;
    let sample_t = if exact { 0.5 * (a + b) } else { a };
    let co = Coefficients {
        b: market.b_at(sample_t),
        sigma_t: market.sigma_at(sample_t).transpose(),
    };
    let strategy = match rule {
        Rule::Hold(pi) => {
            return Ok(Step::Hold {
                drift: co.b.dot(pi) * dt,
                load: &co.sigma_t * pi,
            })
        }
        Rule::Follow(s) => *s,
    };
    let unavailable = || SimError::SchemeUnavailable {
        strategy: strategy.name(),
        scheme: config.scheme.name(),
    };

    // Kelly exposure over the interval: ∫bᵀv*, ∫‖σᵀv*‖² and the loading
    // applied to ΔW.
    let (bv, qq, load) = if exact {
        let q_int = kelly.integrated_variance(a, b);
        let ell = kelly.loading(sample_t);
        let norm2 = ell.norm_squared();
        let scale = if norm2 > 0.0 { (q_int / (dt * norm2)).sqrt() } else { 0.0 };
        (q_int, q_int, ell * scale)
    } else {
        let v = kelly.v_star(a);
        let ell = &co.sigma_t * &v;
        (co.b.dot(&v) * dt, ell.norm_squared() * dt, ell)
    };
    let log_form = !matches!(config.scheme, Scheme::Euler { .. });
    let scaled_floor = |floor: f64, c: f64, absorb: bool| {
        if log_form {
            Step::Log {
                floor,
                absorb,
                drift: c * bv - 0.5 * c * c * qq,
                load: &load * c,
            }
        } else {
            Step::Affine {
                c0: -floor * c * bv,
                c1: c * bv,
                s0: &load * (-floor * c),
                s1: &load * c,
                floor: absorb.then_some(floor),
            }
        }
    };

    Ok(match strategy {
        Strategy::Equilibrium { xi } => scaled_floor(*xi, 1.0, true),
        Strategy::ScaledEquilibrium { xi, scale } => scaled_floor(*xi, *scale, true),
        Strategy::FractionalKelly { gamma } => scaled_floor(0.0, *gamma, false),
        Strategy::Naive { xi } => {
            if exact {
                return Err(unavailable());
            }
            let cutoff = kelly.horizon() - config.naive_truncation;
            let v = kelly.remaining_variance(a.min(cutoff));
            scaled_floor(*xi, naive_delta(v)?, true)
        }
        Strategy::PreCommitted {
            xi,
            anchor_t,
            anchor_x,
        } => {
            if a < *anchor_t - 1e-12 {
                return Err(SimError::InvalidConfig(
                    "pre-committed strategy followed before its anchor time".into(),
                ));
            }
            let state = PreCommittedState::new(*xi, *anchor_t, *anchor_x, kelly)?;
            let v_start = kelly.remaining_variance(a);
            if exact {
                Step::PreCommittedExact {
                    state,
                    start: a,
                    v_start,
                    v_end: kelly.remaining_variance(b),
                    load,
                }
            } else {
                Step::PreCommittedEuler {
                    state,
                    v_start,
                    bv,
                    qq,
                    load,
                    log: log_form,
                }
            }
        }
        Strategy::ZeroInvestment { theta, anchor_x } => {
            let th = theta.eval(sample_t).column(0).into_owned();
            let s = &co.sigma_t * &th;
            let bt = co.b.dot(&th) * dt;
            if log_form {
                Step::Log {
                    floor: *anchor_x,
                    absorb: false,
                    drift: bt - 0.5 * s.norm_squared() * dt,
                    load: s,
                }
            } else {
                Step::Affine {
                    c0: -anchor_x * bt,
                    c1: bt,
                    s0: &s * -anchor_x,
                    s1: s,
                    floor: None,
                }
            }
        }
        Strategy::GeneralAffine(aff) => {
            if exact {
                return Err(unavailable());
            }
            let (t0, t1) = (aff.intercept(a), aff.slope(a));
            Step::Affine {
                c0: co.b.dot(&t0) * dt,
                c1: co.b.dot(&t1) * dt,
                s0: &co.sigma_t * t0,
                s1: &co.sigma_t * t1,
                floor: None,
            }
        }
    })
}

/// Run one path; returns whether it was clamped at a floor.
fn run_path(
    intervals: &[Interval],
    initial_records: &[usize],
    x0: f64,
    d: usize,
    normals: &mut PathNormals,
    row: &mut [f64],
) -> bool {
    let mut x = x0;
    let mut z: Option<f64> = None;
    let mut breached = false;
    let mut dw = vec![0.0; d];
    for &i in initial_records {
        row[i] = x0;
    }
    for iv in intervals {
        let sd = iv.dt.sqrt();
        for w in dw.iter_mut() {
            *w = sd * normals.next();
        }
        let dot = |v: &DVector<f64>| v.iter().zip(&dw).map(|(a, b)| a * b).sum::<f64>();
        match &iv.step {
            Step::Hold { drift, load } => {
                x += drift + dot(load);
                z = None;
            }
            Step::Log {
                floor,
                absorb,
                drift,
                load,
            } => {
                let h = x - floor;
                if !(*absorb && h <= 0.0) && h != 0.0 {
                    x = floor + h * (drift + dot(load)).exp();
                }
            }
            Step::Affine {
                c0,
                c1,
                s0,
                s1,
                floor,
            } => match floor {
                Some(f) if x <= *f => {}
                _ => {
                    x += c0 + c1 * x + dot(s0) + x * dot(s1);
                    if let Some(f) = floor {
                        if x <= *f {
                            x = f + BREACH_CLAMP;
                            breached = true;
                        }
                    }
                }
            },
            Step::PreCommittedExact {
                state,
                start,
                v_start,
                v_end,
                load,
            } => {
                let zz = match z {
                    Some(zz) => Some(zz),
                    None => initial_state(state, *start, *v_start, x),
                };
                if let Some(mut zz) = zz {
                    zz += dot(load);
                    x = if *v_end > 0.0 {
                        state.xi + state.k_star * normal::cdf((zz - v_end) / v_end.sqrt())
                    } else if zz >= 0.0 {
                        state.cap()
                    } else {
                        state.xi
                    };
                    z = Some(zz);
                }
            }
            Step::PreCommittedEuler {
                state,
                v_start,
                bv,
                qq,
                load,
                log,
                ..
            } => {
                if x > state.xi && x < state.cap() {
                    let m = precommitted_delta_with_variance(state, *v_start, x)
                        .expect("wealth inside the band");
                    if *log {
                        x = state.xi + (x - state.xi) * (m * bv - 0.5 * m * m * qq + m * dot(load)).exp();
                    } else {
                        x += m * (x - state.xi) * (bv + dot(load));
                        if x <= state.xi {
                            x = state.xi + BREACH_CLAMP;
                            breached = true;
                        }
                    }
                }
            }
        }
        for &r in &iv.records {
            row[r] = x;
        }
    }
    breached
}

/// Driving-integral value at the start of a pre-committed stretch; `None`
/// for wealth outside the band, where the strategy holds nothing.
fn initial_state(state: &PreCommittedState, start: f64, v_start: f64, x: f64) -> Option<f64> {
    if start == state.anchor_t && x == state.anchor_x {
        return Some(0.0);
    }
    state.state_variable(v_start, x).ok()
}
