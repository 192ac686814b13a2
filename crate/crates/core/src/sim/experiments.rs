//! Finite-ε deviation experiments and log-utility estimates.
//!
//! A deviation holds a fixed dollar position `π` on `[t, t+ε)` and then
//! returns to the strategy. The undeviated run holds `π̂(t, x)` on the same
//! window, so the two runs differ only through `π − π̂(t, x)`: a deviation
//! to `π̂(t, x)` itself gives identical paths. Freezing the position for
//! the window changes the undeviated quantile only at order `o(ε)`.

use super::stats::{empirical_quantile, mean_with_stderr, paired_bootstrap_stderr, QuantileEstimate};
use super::{simulate, simulate_plan, Phase, Rule, SimConfig, SimError};
use crate::kelly::KellyCurve;
use crate::quantile::MultiTimeObjective;
use crate::strategy::Strategy;
use nalgebra::DVector;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerturbationResult {
    pub eps: f64,
    pub alpha: f64,
    pub q_base: f64,
    pub q_perturbed: f64,
    /// `q_perturbed − q_base`.
    pub diff: f64,
    /// Paired bootstrap standard error of `diff`.
    pub stderr: f64,
    /// `diff / eps`.
    pub rate_estimate: f64,
}

impl PerturbationResult {
    /// `diff / stderr`; infinite for a nonzero diff with zero error.
    pub fn z_score(&self) -> f64 {
        if self.stderr > 0.0 {
            self.diff / self.stderr
        } else if self.diff == 0.0 {
            0.0
        } else {
            self.diff.signum() * f64::INFINITY
        }
    }

    pub fn significantly_positive(&self, sigmas: f64) -> bool {
        self.z_score() > sigmas
    }

    pub fn significantly_negative(&self, sigmas: f64) -> bool {
        self.z_score() < -sigmas
    }
}

/// Compare `objective` on deviated and undeviated runs from `(t, x)`.
#[allow(clippy::too_many_arguments)]
fn paired_run<F>(
    strategy: &Strategy,
    kelly: &KellyCurve,
    t: f64,
    x: f64,
    pi_hat: &DVector<f64>,
    pi: &DVector<f64>,
    eps: f64,
    alpha: f64,
    config: &SimConfig,
    objective: F,
) -> Result<PerturbationResult, SimError>
where
    F: Fn(&[Vec<f64>]) -> Result<f64, SimError> + Sync,
{
    let horizon = kelly.horizon();
    if !(eps > 0.0 && t + eps <= horizon + 1e-12) {
        return Err(SimError::InvalidConfig(format!(
            "deviation window [{t}, {}) must be nonempty and end by the horizon",
            t + eps
        )));
    }
    let switch = (t + eps).min(horizon);
    let plan = |hold: &DVector<f64>| {
        vec![
            Phase {
                until: switch,
                rule: Rule::Hold(hold.clone()),
            },
            Phase {
                until: horizon,
                rule: Rule::Follow(strategy),
            },
        ]
    };
    let base = simulate_plan(&plan(pi_hat), kelly, t, x, config, &[switch])?;
    let pert = simulate_plan(&plan(pi), kelly, t, x, config, &[switch])?;
    let cols = base.record_times.len();
    let base_cols: Vec<Vec<f64>> = (0..cols).map(|i| base.at(i)).collect();
    let pert_cols: Vec<Vec<f64>> = (0..cols).map(|i| pert.at(i)).collect();
    let q_base = objective(&base_cols)?;
    let q_perturbed = objective(&pert_cols)?;
    let identical = base_cols == pert_cols;
    let stderr = if identical {
        0.0
    } else {
        let pick = |cols: &[Vec<f64>], idx: &[usize]| -> Vec<Vec<f64>> {
            cols.iter()
                .map(|c| idx.iter().map(|&i| c[i]).collect())
                .collect()
        };
        paired_bootstrap_stderr(config.num_paths, config.bootstrap_resamples, config.seed, |idx| {
            Ok(objective(&pick(&pert_cols, idx))? - objective(&pick(&base_cols, idx))?)
        })?
    };
    let diff = q_perturbed - q_base;
    Ok(PerturbationResult {
        eps,
        alpha,
        q_base,
        q_perturbed,
        diff,
        stderr,
        rate_estimate: diff / eps,
    })
}

fn check_deviation(kelly: &KellyCurve, pi: &DVector<f64>) -> Result<(), SimError> {
    let cone = kelly.market().constraint();
    if pi.len() != kelly.market().assets() {
        return Err(SimError::InvalidConfig(format!(
            "deviation has length {}, market has {} assets",
            pi.len(),
            kelly.market().assets()
        )));
    }
    if !cone.admits(pi, 1e-10) {
        return Err(SimError::InfeasibleDeviation(cone.min_slack(pi)));
    }
    Ok(())
}

fn terminal_config(config: &SimConfig, kelly: &KellyCurve) -> SimConfig {
    config.clone().with_record_times(vec![kelly.horizon()])
}

/// Terminal α-quantile difference between holding `pi` and holding
/// `π̂(t, x)` on `[t, t+ε)`, for each `ε` in `eps_list`.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_test(
    strategy: &Strategy,
    alpha: f64,
    t: f64,
    x: f64,
    pi: &DVector<f64>,
    eps_list: &[f64],
    kelly: &KellyCurve,
    config: &SimConfig,
) -> Result<Vec<PerturbationResult>, SimError> {
    check_deviation(kelly, pi)?;
    let pi_hat = strategy.allocation(kelly, t, x)?;
    let cfg = terminal_config(config, kelly);
    eps_list
        .iter()
        .map(|&eps| {
            paired_run(strategy, kelly, t, x, &pi_hat, pi, eps, alpha, &cfg, |cols| {
                empirical_quantile(&cols[0], alpha)
            })
        })
        .collect()
}

/// Start at the floor `x = ξ` of the equilibrium strategy, hold `v*(t)`
/// dollars for `ε`, then follow the strategy (which holds nothing at or
/// below the floor). The undeviated median is `ξ` exactly.
pub fn boundary_deviation_test(
    xi: f64,
    t: f64,
    eps: f64,
    kelly: &KellyCurve,
    config: &SimConfig,
) -> Result<PerturbationResult, SimError> {
    let eq = Strategy::Equilibrium { xi };
    let pi = kelly.v_star(t);
    let results = perturbation_test(&eq, 0.5, t, xi, &pi, &[eps], kelly, config)?;
    Ok(results[0])
}

/// Multi-date version of [`perturbation_test`]: the objective is the
/// weighted sum of α-quantiles at the dates in force at `t`.
#[allow(clippy::too_many_arguments)]
pub fn multi_time_perturbation_test(
    obj: &MultiTimeObjective,
    strategy: &Strategy,
    alpha: f64,
    t: f64,
    x: f64,
    pi: &DVector<f64>,
    eps: f64,
    kelly: &KellyCurve,
    config: &SimConfig,
) -> Result<PerturbationResult, SimError> {
    check_deviation(kelly, pi)?;
    let terms = obj.active_terms(t)?;
    let pi_hat = strategy.allocation(kelly, t, x)?;
    let cfg = config
        .clone()
        .with_record_times(terms.iter().map(|(d, _)| *d).collect());
    let weights: Vec<f64> = terms.iter().map(|(_, w)| *w).collect();
    paired_run(strategy, kelly, t, x, &pi_hat, pi, eps, alpha, &cfg, |cols| {
        cols.iter()
            .zip(&weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|(c, w)| Ok(w * empirical_quantile(c, alpha)?))
            .sum()
    })
}

/// Intercept of a weighted least-squares line through `(ε, diff/ε)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateExtrapolation {
    pub rate: f64,
    pub stderr: f64,
    pub slope: f64,
}

/// Extrapolate the finite-ε rate estimates to `ε = 0`.
pub fn richardson(results: &[PerturbationResult]) -> Result<RateExtrapolation, SimError> {
    match results {
        [] => Err(SimError::EmptyBatch),
        [r] => Ok(RateExtrapolation {
            rate: r.rate_estimate,
            stderr: r.stderr / r.eps,
            slope: 0.0,
        }),
        _ => {
            let weighted = results.iter().all(|r| r.stderr > 0.0);
            let w: Vec<f64> = results
                .iter()
                .map(|r| {
                    if weighted {
                        (r.eps / r.stderr).powi(2)
                    } else {
                        1.0
                    }
                })
                .collect();
            let sw: f64 = w.iter().sum();
            let mx = results.iter().zip(&w).map(|(r, w)| w * r.eps).sum::<f64>() / sw;
            let my = results.iter().zip(&w).map(|(r, w)| w * r.rate_estimate).sum::<f64>() / sw;
            let sxx: f64 = results.iter().zip(&w).map(|(r, w)| w * (r.eps - mx).powi(2)).sum();
            let sxy: f64 = results
                .iter()
                .zip(&w)
                .map(|(r, w)| w * (r.eps - mx) * (r.rate_estimate - my))
                .sum();
            if sxx <= 0.0 {
                return Err(SimError::InvalidConfig("need at least two distinct eps".into()));
            }
            let slope = sxy / sxx;
            let rate = my - slope * mx;
            let stderr = if weighted {
                (1.0 / sw + mx * mx / sxx).sqrt()
            } else {
                0.0
            };
            Ok(RateExtrapolation {
                rate,
                stderr,
                slope,
            })
        }
    }
}

/// Monte Carlo `E[ln(X(T) − ξ)]` for a strategy started at `(t0, x0)`.
pub fn log_utility_estimate(
    strategy: &Strategy,
    xi: f64,
    kelly: &KellyCurve,
    t0: f64,
    x0: f64,
    config: &SimConfig,
) -> Result<QuantileEstimate, SimError> {
    if !(x0 > xi) {
        return Err(SimError::InvalidConfig(format!(
            "initial wealth {x0} must exceed the floor {xi}"
        )));
    }
    let batch = simulate(strategy, kelly, t0, x0, &terminal_config(config, kelly))?;
    let terminal = batch.terminal();
    let below = terminal.iter().filter(|x| **x <= xi).count();
    if below > 0 || batch.breached_paths() > 0 {
        return Err(SimError::FloorBreach {
            fraction: below.max(batch.breached_paths()) as f64 / terminal.len() as f64,
        });
    }
    let logs: Vec<f64> = terminal.iter().map(|x| (x - xi).ln()).collect();
    mean_with_stderr(&logs)
}

/// [`log_utility_estimate`] for `π = c·v*(t)(x − ξ)` over `scales`, all on
/// the same random paths.
pub fn log_utility_scan(
    xi: f64,
    scales: &[f64],
    kelly: &KellyCurve,
    x0: f64,
    config: &SimConfig,
) -> Result<Vec<(f64, QuantileEstimate)>, SimError> {
    scales
        .iter()
        .map(|&c| {
            let s = Strategy::ScaledEquilibrium { xi, scale: c };
            Ok((c, log_utility_estimate(&s, xi, kelly, 0.0, x0, config)?))
        })
        .collect()
}
