//! Synthetic cross-section of households following portfolio insurance.
//!
//! Household `j` starts with net worth `x₀ⱼ = x̄₀e^{ϱU}` and insures the
//! floor `ξⱼ = βx₀ⱼ`. After `t` years its gross return on the insured part
//! is `R = (1+μt)e^{−ϖ²t/2 + ϖ√t Z}`, so wealth is `ξ + (x₀ − ξ)R` and the
//! risky share is `(1−β)R/(β + (1−β)R)`. Regressing shares on log wealth
//! across households gives the wealth sensitivity of the share.

use crate::sim::rng::stream_rng;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HouseholdError {
    #[error("regressor is constant")]
    DegenerateRegressor,
    #[error("need two or more observations of equal length, got {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid household configuration: {0}")]
    InvalidConfig(String),
}

/// Logarithm applied to wealth before regressing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    Natural,
    /// Base 2; this is the scale on which the published sensitivities are
    /// reproduced.
    #[default]
    Binary,
}

impl LogBase {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Binary => x.log2(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HouseholdConfig {
    pub num_households: usize,
    pub xbar0: f64,
    pub rho_disp: f64,
    pub beta: f64,
    pub mu: f64,
    pub varpi: f64,
    pub ages_t: Vec<f64>,
    pub replications: usize,
    pub seed: u64,
    pub log_base: LogBase,
}

impl Default for HouseholdConfig {
    fn default() -> Self {
        Self {
            num_households: 3000,
            xbar0: 61811.8,
            rho_disp: 0.0569,
            beta: 0.4,
            mu: 0.04,
            varpi: 0.0065,
            ages_t: vec![0.0, 10.0, 20.0, 30.0, 40.0],
            replications: 2000,
            seed: 7,
            log_base: LogBase::Binary,
        }
    }
}

impl HouseholdConfig {
    pub fn validate(&self) -> Result<(), HouseholdError> {
        let bad = |m: &str| Err(HouseholdError::InvalidConfig(m.into()));
        if self.num_households < 2 {
            return bad("need at least two households");
        }
        if self.replications == 0 {
            return bad("need at least one replication");
        }
        if !(self.xbar0 > 0.0 && self.rho_disp > 0.0 && self.mu > -1.0 && self.varpi > 0.0) {
            return bad("xbar0, rho_disp and varpi must be positive");
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta must lie in (0, 1)");
        }
        if self.ages_t.iter().any(|t| !(*t >= 0.0)) {
            return bad("year offsets must be nonnegative");
        }
        Ok(())
    }
}

/// `(1+μt)e^{−ϖ²t/2 + ϖ√t z}`.
pub fn gross_return(mu: f64, varpi: f64, t: f64, z: f64) -> f64 {
    (1.0 + mu * t) * (-0.5 * varpi * varpi * t + varpi * t.sqrt() * z).exp()
}

/// Risky share `(1−β)R/(β + (1−β)R)`.
pub fn risky_share(beta: f64, gross: f64) -> f64 {
    let upside = (1.0 - beta) * gross;
    upside / (beta + upside)
}

/// Households observed `t` years after the start.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub t: f64,
    pub wealth: Vec<f64>,
    pub share: Vec<f64>,
}

/// Standard normal draws for one replication: `U` per household, then
/// one `Z` per household for each age in order.
struct Draws {
    u: Vec<f64>,
    z: Vec<Vec<f64>>,
}

fn draws(seed: u64, rep: usize, households: usize, ages: usize) -> Draws {
    let mut rng = stream_rng(seed, rep as u64);
    let mut normals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
    let u = normals(households);
    let z = (0..ages).map(|_| normals(households)).collect();
    Draws { u, z }
}

fn cohort_from(draws: &Draws, cfg: &HouseholdConfig, beta: f64, varpi: f64) -> Vec<Cohort> {
    cfg.ages_t
        .iter()
        .zip(&draws.z)
        .map(|(&t, zs)| {
            let (wealth, share) = draws
                .u
                .iter()
                .zip(zs)
                .map(|(u, z)| {
                    let x0 = cfg.xbar0 * (cfg.rho_disp * u).exp();
                    let xi = beta * x0;
                    let r = gross_return(cfg.mu, varpi, t, *z);
                    (xi + (x0 - xi) * r, risky_share(beta, r))
                })
                .unzip();
            Cohort { t, wealth, share }
        })
        .collect()
}

/// Households of replication `replication_index`, one cohort per age.
pub fn simulate_cohort(cfg: &HouseholdConfig, replication_index: usize) -> Result<Vec<Cohort>, HouseholdError> {
    cfg.validate()?;
    let d = draws(cfg.seed, replication_index, cfg.num_households, cfg.ages_t.len());
    Ok(cohort_from(&d, cfg, cfg.beta, cfg.varpi))
}

/// OLS slope of `y` on `x` with an intercept, times 100.
pub fn ols_slope(x: &[f64], y: &[f64]) -> Result<f64, HouseholdError> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(HouseholdError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 {
        return Err(HouseholdError::DegenerateRegressor);
    }
    Ok(100.0 * sxy / sxx)
}

/// Share sensitivity for one cohort; zero when shares or wealth do not vary.
pub fn cohort_slope(cohort: &Cohort, base: LogBase) -> f64 {
    if cohort.share.windows(2).all(|w| w[0] == w[1]) {
        return 0.0;
    }
    let logs: Vec<f64> = cohort.wealth.iter().map(|x| base.apply(*x)).collect();
    ols_slope(&logs, &cohort.share).unwrap_or(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TableCell {
    pub beta: f64,
    pub varpi: f64,
    pub t: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionTable {
    pub betas: Vec<f64>,
    pub varpis: Vec<f64>,
    pub ages_t: Vec<f64>,
    pub replications: usize,
    pub cells: Vec<TableCell>,
}

impl RegressionTable {
    pub fn cell(&self, beta: f64, varpi: f64, t: f64) -> Option<&TableCell> {
        self.cells.iter().find(|c| {
            (c.beta - beta).abs() < 1e-12 && (c.varpi - varpi).abs() < 1e-12 && (c.t - t).abs() < 1e-12
        })
    }

    /// Rows `varpi × beta`, one `mean (std)` column per age, two decimals.
    pub fn to_wide_csv(&self) -> String {
        let mut out = String::from("varpi,beta");
        for t in &self.ages_t {
            write!(out, ",t={t}").unwrap();
        }
        out.push('\n');
        for &varpi in &self.varpis {
            for &beta in &self.betas {
                write!(out, "{varpi},{beta}").unwrap();
                for &t in &self.ages_t {
                    let c = self.cell(beta, varpi, t).expect("every cell is filled");
                    write!(out, ",{:.2} ({:.2})", c.mean + 0.0, c.std).unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    /// One row per cell at full precision.
    pub fn to_long_csv(&self) -> String {
        let mut out = String::from("varpi,beta,t,mean,std\n");
        for c in &self.cells {
            writeln!(out, "{},{},{},{:.11e},{:.11e}", c.varpi, c.beta, c.t, c.mean, c.std).unwrap();
        }
        out
    }
}

/// Mean and standard deviation of the share sensitivity across
/// replications for every `(β, ϖ, t)`. All cells use the same draws.
pub fn replicate_table(
    betas: &[f64],
    varpis: &[f64],
    base: &HouseholdConfig,
) -> Result<RegressionTable, HouseholdError> {
    for &beta in betas {
        for &varpi in varpis {
            HouseholdConfig {
                beta,
                varpi,
                ..base.clone()
            }
            .validate()?;
        }
    }
    let ages = base.ages_t.len();
    let cells_per_rep = betas.len() * varpis.len() * ages;
    // slopes[rep][(varpi, beta, age)]
    let slopes: Vec<Vec<f64>> = (0..base.replications)
        .into_par_iter()
        .map(|rep| {
            let d = draws(base.seed, rep, base.num_households, ages);
            let mut row = Vec::with_capacity(cells_per_rep);
            for &varpi in varpis {
                for &beta in betas {
                    for c in cohort_from(&d, base, beta, varpi) {
                        row.push(cohort_slope(&c, base.log_base));
                    }
                }
            }
            row
        })
        .collect();
    let mut cells = Vec::with_capacity(cells_per_rep);
    let mut k = 0;
    for &varpi in varpis {
        for &beta in betas {
            for &t in &base.ages_t {
                let col: Vec<f64> = slopes.iter().map(|r| r[k]).collect();
                let n = col.len() as f64;
                let mean = col.iter().sum::<f64>() / n;
                let std = crate::sim::stats::sample_std(&col);
                cells.push(TableCell {
                    beta,
                    varpi,
                    t,
                    mean,
                    std,
                });
                k += 1;
            }
        }
    }
    Ok(RegressionTable {
        betas: betas.to_vec(),
        varpis: varpis.to_vec(),
        ages_t: base.ages_t.clone(),
        replications: base.replications,
        cells,
    })
}
