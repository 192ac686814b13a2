//! Closed-form terminal-wealth laws, quantiles and deviation rates.
//!
//! Most strategies here leave `log(X(T) − L)` Gaussian for some floor `L`
//! that does not depend on the starting wealth, which gives `F`, its
//! derivatives and the quantile function in closed form.

use crate::kelly::KellyCurve;
use crate::market::MarketModel;
use crate::normal;
use crate::quadrature::{adaptive_simpson, simpson_refined};
use crate::strategy::{naive_delta, PreCommittedState, Strategy, StrategyError};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum QuantileError {
    #[error("wealth {x} must exceed the floor {floor}")]
    BelowFloor { x: f64, floor: f64 },
    #[error("wealth must be positive, got {0}")]
    NonPositiveWealth(f64),
    #[error("quantile level must lie in (0, 1), got {0}")]
    InvalidLevel(f64),
    #[error("need 0 <= t < horizon <= T, got t = {t}, horizon = {horizon}")]
    InvalidHorizon { t: f64, horizon: f64 },
    #[error("remaining Kelly variance is zero")]
    DegenerateVariance,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no closed-form terminal law for the {0} strategy")]
    UnsupportedStrategy(&'static str),
    #[error("distribution has zero density at the quantile")]
    DegenerateQuantile,
    #[error("deviation carries no risk")]
    ZeroDeviation,
    #[error("the naive strategy's law is not defined at the horizon itself")]
    HorizonContact,
    #[error("weight row mismatch: {0}")]
    WeightRowMismatch(String),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
}

/// `F(t, x, y)` and its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FDerivatives {
    pub f: f64,
    pub f_x: f64,
    pub f_xx: f64,
    pub f_y: f64,
}

/// Law of `L + (x − L)e^N` with `N ~ Normal(mu, s²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FloorLognormal {
    pub floor: f64,
    pub x: f64,
    pub mu: f64,
    pub s: f64,
}

impl FloorLognormal {
    pub fn new(floor: f64, x: f64, mu: f64, s: f64) -> Result<Self, QuantileError> {
        if !(x > floor) {
            return Err(QuantileError::BelowFloor { x, floor });
        }
        Ok(Self { floor, x, mu, s })
    }

    pub fn quantile(&self, alpha: f64) -> f64 {
        let z = if self.s > 0.0 { normal::inv_cdf(alpha) } else { 0.0 };
        self.floor + (self.x - self.floor) * (self.mu + self.s * z).exp()
    }

    pub fn median(&self) -> f64 {
        self.floor + (self.x - self.floor) * self.mu.exp()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        self.derivatives(y).f
    }

    /// Exact `F`, `F_x`, `F_xx`, `F_y` at `y`; zero below the floor.
    pub fn derivatives(&self, y: f64) -> FDerivatives {
        let zero = FDerivatives {
            f: 0.0,
            f_x: 0.0,
            f_xx: 0.0,
            f_y: 0.0,
        };
        if y <= self.floor {
            return zero;
        }
        let (hx, hy) = (self.x - self.floor, y - self.floor);
        if self.s <= 0.0 {
            let f = if (hy / hx).ln() >= self.mu { 1.0 } else { 0.0 };
            return FDerivatives { f, ..zero };
        }
        let s = self.s;
        let d = ((hy / hx).ln() - self.mu) / s;
        let d_x = -1.0 / (s * hx);
        let d_xx = 1.0 / (s * hx * hx);
        let d_y = 1.0 / (s * hy);
        let dens = normal::pdf(d);
        FDerivatives {
            f: normal::cdf(d),
            f_x: dens * d_x,
            f_xx: dens * (d_xx - d * d_x * d_x),
            f_y: dens * d_y,
        }
    }
}

/// Terminal (or intermediate-horizon) wealth law of a strategy started at `(t, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum WealthLaw {
    FloorLognormal(FloorLognormal),
    PointMass { value: f64 },
    /// `ξ + k* Φ((z + √w N − V_h)/√V_h)`; two-point `{ξ, ξ+k*}` when `V_h = 0`.
    PreCommitted {
        xi: f64,
        k_star: f64,
        z: f64,
        increment_variance: f64,
        horizon_variance: f64,
    },
}

impl WealthLaw {
    /// Right-continuous quantile `sup{y : F(y) ≤ α}`.
    pub fn quantile(&self, alpha: f64) -> f64 {
        match *self {
            WealthLaw::FloorLognormal(l) => l.quantile(alpha),
            WealthLaw::PointMass { value } => value,
            WealthLaw::PreCommitted {
                xi,
                k_star,
                z,
                increment_variance: w,
                horizon_variance: vh,
            } => {
                if vh <= 0.0 {
                    let lower_mass = if w > 0.0 {
                        normal::cdf(-z / w.sqrt())
                    } else if z >= 0.0 {
                        0.0
                    } else {
                        1.0
                    };
                    if alpha >= lower_mass {
                        xi + k_star
                    } else {
                        xi
                    }
                } else {
                    let zz = z + w.sqrt() * normal::inv_cdf(alpha);
                    xi + k_star * normal::cdf((zz - vh) / vh.sqrt())
                }
            }
        }
    }
}

fn check_level(alpha: f64) -> Result<(), QuantileError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(QuantileError::InvalidLevel(alpha))
    }
}

/// `ξ + (x − ξ)e^{V/2}`.
pub fn median_equilibrium(xi: f64, x: f64, remaining_variance: f64) -> Result<f64, QuantileError> {
    if !(x > xi) {
        return Err(QuantileError::BelowFloor { x, floor: xi });
    }
    Ok(xi + (x - xi) * (0.5 * remaining_variance).exp())
}

/// `x e^{(γ − γ²/2)V}`.
pub fn median_fractional_kelly(
    gamma: f64,
    x: f64,
    remaining_variance: f64,
) -> Result<f64, QuantileError> {
    if !(x > 0.0) {
        return Err(QuantileError::NonPositiveWealth(x));
    }
    if !(gamma > 0.0) {
        return Err(QuantileError::InvalidParameter(format!(
            "gamma must be positive, got {gamma}"
        )));
    }
    Ok(x * ((gamma - 0.5 * gamma * gamma) * remaining_variance).exp())
}

/// Wealth-to-floor ratio at which the fractional-Kelly and equilibrium
/// medians coincide: `(e^{V/2} − 1)/(e^{V/2} − e^{(γ−γ²/2)V})`.
pub fn crossover_a(gamma: f64, remaining_variance: f64) -> Result<f64, QuantileError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(QuantileError::InvalidParameter(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )));
    }
    if !(remaining_variance > 0.0) {
        return Err(QuantileError::DegenerateVariance);
    }
    let v = remaining_variance;
    let half = (0.5 * v).exp_m1();
    let frac = ((gamma - 0.5 * gamma * gamma) * v).exp_m1();
    Ok(half / (half - frac))
}

/// Integral of `f(s)` over `[a, b]`, split at the coefficient breakpoints.
pub(crate) fn integrate_market<F: Fn(f64) -> f64>(
    model: &MarketModel,
    a: f64,
    b: f64,
    f: F,
) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut knots = vec![a];
    knots.extend(
        model
            .coefficient_breakpoints()
            .into_iter()
            .filter(|&s| s > a && s < b),
    );
    knots.push(b);
    knots
        .windows(2)
        .map(|w| {
            // stay inside the open segment so right-continuity does not
            // pick up the next segment's value at the right end
            let (lo, hi) = (w[0], w[1]);
            let shrink = 1e-13 * (hi - lo);
            simpson_refined(&f, lo + shrink, hi - shrink, 1e-12) * (hi - lo)
                / (hi - lo - 2.0 * shrink)
        })
        .sum()
}

/// α-quantile of `log(X(T)/x)` when a constant fraction `v` of wealth is
/// held in each risky asset from `t` on: drift `∫(bᵀv − ½‖σᵀv‖²)` plus
/// `Φ⁻¹(α)·√∫‖σᵀv‖²`.
pub fn quantile_constant_proportion(
    v: &DVector<f64>,
    alpha: f64,
    t: f64,
    model: &MarketModel,
) -> Result<f64, QuantileError> {
    check_level(alpha)?;
    let horizon = model.horizon();
    if !(t >= 0.0 && t < horizon) {
        return Err(QuantileError::InvalidHorizon { t, horizon });
    }
    if v.len() != model.assets() {
        return Err(QuantileError::InvalidParameter(format!(
            "proportion vector has length {}, market has {} assets",
            v.len(),
            model.assets()
        )));
    }
    let drift = integrate_market(model, t, horizon, |s| {
        let vol = model.sigma_at(s).transpose() * v;
        model.b_at(s).dot(v) - 0.5 * vol.norm_squared()
    });
    let var = integrate_market(model, t, horizon, |s| {
        (model.sigma_at(s).transpose() * v).norm_squared()
    });
    Ok(drift + var.sqrt() * normal::inv_cdf(alpha))
}

/// `F(t, x, y)` and its derivatives under the equilibrium strategy with
/// floor `ξ`, where `X(T) = ξ + (x − ξ)e^N`, `N ~ Normal(V/2, V)`.
pub fn equilibrium_f_and_derivatives(
    xi: f64,
    x: f64,
    y: f64,
    remaining_variance: f64,
) -> Result<FDerivatives, QuantileError> {
    if !(remaining_variance > 0.0) {
        return Err(QuantileError::DegenerateVariance);
    }
    let law = FloorLognormal::new(xi, x, 0.5 * remaining_variance, remaining_variance.sqrt())?;
    Ok(law.derivatives(y))
}

/// `∫(Δ_na − ½Δ_na²)q ds` and `∫Δ_na² q ds` between the times at which
/// the remaining Kelly variance equals `v_start` and `v_end < v_start`.
///
/// With `u = V(s)` the integrals become `∫_{v_end}^{v_start} g(Δ(u)) du`,
/// taken in `ln u` so the `u^{-1/2}` behaviour near zero is harmless.
pub fn naive_exponents(v_start: f64, v_end: f64) -> Result<(f64, f64), QuantileError> {
    if !(v_end > 0.0) {
        return Err(QuantileError::HorizonContact);
    }
    if v_end >= v_start {
        return Ok((0.0, 0.0));
    }
    let delta = |y: f64| {
        let u = y.exp();
        (u, naive_delta(u).expect("positive variance"))
    };
    let (a, b) = (v_end.ln(), v_start.ln());
    let mean = adaptive_simpson(
        |y| {
            let (u, d) = delta(y);
            u * (d - 0.5 * d * d)
        },
        a,
        b,
        1e-13,
    );
    let var = adaptive_simpson(
        |y| {
            let (u, d) = delta(y);
            u * d * d
        },
        a,
        b,
        1e-13,
    );
    Ok((mean, var))
}

/// Law of `X(horizon)` for the strategy started at `(t, x)`.
pub fn wealth_law(
    strategy: &Strategy,
    kelly: &KellyCurve,
    t: f64,
    x: f64,
    horizon: f64,
) -> Result<WealthLaw, QuantileError> {
    let big_t = kelly.horizon();
    if !(t >= 0.0 && t < horizon && horizon <= big_t + 1e-12) {
        return Err(QuantileError::InvalidHorizon { t, horizon });
    }
    let v = kelly.integrated_variance(t, horizon);
    let lognormal = |floor: f64, c: f64| {
        FloorLognormal::new(floor, x, (c - 0.5 * c * c) * v, c * v.sqrt())
            .map(WealthLaw::FloorLognormal)
    };
    match strategy {
        Strategy::Equilibrium { xi } => lognormal(*xi, 1.0),
        Strategy::ScaledEquilibrium { xi, scale } => lognormal(*xi, *scale),
        Strategy::FractionalKelly { gamma } => {
            if !(x > 0.0) {
                return Err(QuantileError::NonPositiveWealth(x));
            }
            lognormal(0.0, *gamma)
        }
        Strategy::Naive { xi } => {
            if !(x > *xi) {
                return Err(QuantileError::BelowFloor { x, floor: *xi });
            }
            let (mean, var) =
                naive_exponents(kelly.remaining_variance(t), kelly.remaining_variance(horizon))?;
            Ok(WealthLaw::FloorLognormal(FloorLognormal::new(
                *xi,
                x,
                mean,
                var.sqrt(),
            )?))
        }
        Strategy::PreCommitted {
            xi,
            anchor_t,
            anchor_x,
        } => {
            if t < *anchor_t {
                return Err(QuantileError::InvalidHorizon { t, horizon });
            }
            let state = PreCommittedState::new(*xi, *anchor_t, *anchor_x, kelly)?;
            let v_t = kelly.remaining_variance(t);
            let z = if t == *anchor_t && x == *anchor_x {
                0.0
            } else {
                state.state_variable(v_t, x)?
            };
            Ok(WealthLaw::PreCommitted {
                xi: *xi,
                k_star: state.k_star,
                z,
                increment_variance: v,
                horizon_variance: kelly.remaining_variance(horizon),
            })
        }
        Strategy::ZeroInvestment { theta, anchor_x } => {
            if x == *anchor_x || theta.is_identically_zero() {
                Ok(WealthLaw::PointMass { value: x })
            } else {
                Err(QuantileError::UnsupportedStrategy("zero_investment"))
            }
        }
        Strategy::GeneralAffine(_) => Err(QuantileError::UnsupportedStrategy("affine")),
    }
}

/// α-quantile of `X(horizon)` for the strategy started at `(t, x)`.
pub fn quantile(
    strategy: &Strategy,
    kelly: &KellyCurve,
    t: f64,
    x: f64,
    alpha: f64,
    horizon: f64,
) -> Result<f64, QuantileError> {
    check_level(alpha)?;
    Ok(wealth_law(strategy, kelly, t, x, horizon)?.quantile(alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeviationRate {
    /// Right derivative in `ε` of the α-quantile after deviating for `ε`.
    pub value: f64,
    pub phi_hat: f64,
    pub phi_pi: f64,
    pub f_y: f64,
    /// The undeviated α-quantile.
    pub quantile: f64,
}

/// `(φ(π̂(t,x)) − φ(π))/F_y` with `φ(v) = F_x bᵀv + ½F_xx‖σᵀv‖²`, all
/// derivatives taken at the undeviated α-quantile.
pub fn deviation_rate(
    strategy: &Strategy,
    alpha: f64,
    t: f64,
    x: f64,
    pi: &DVector<f64>,
    kelly: &KellyCurve,
) -> Result<DeviationRate, QuantileError> {
    check_level(alpha)?;
    let law = match strategy {
        Strategy::Equilibrium { .. }
        | Strategy::ScaledEquilibrium { .. }
        | Strategy::FractionalKelly { .. } => {
            match wealth_law(strategy, kelly, t, x, kelly.horizon())? {
                WealthLaw::FloorLognormal(l) => l,
                _ => unreachable!("insurance-type strategies have lognormal laws"),
            }
        }
        other => return Err(QuantileError::UnsupportedStrategy(other.name())),
    };
    let model = kelly.market();
    if pi.len() != model.assets() {
        return Err(QuantileError::InvalidParameter(format!(
            "deviation has length {}, market has {} assets",
            pi.len(),
            model.assets()
        )));
    }
    let g = law.quantile(alpha);
    let der = law.derivatives(g);
    if !(der.f_y > 0.0) {
        return Err(QuantileError::DegenerateQuantile);
    }
    let b = model.b_at(t);
    let sigma_t = model.sigma_at(t).transpose();
    let phi = |v: &DVector<f64>| der.f_x * b.dot(v) + 0.5 * der.f_xx * (&sigma_t * v).norm_squared();
    let pi_hat = strategy.allocation(kelly, t, x)?;
    let phi_hat = phi(&pi_hat);
    let phi_pi = phi(pi);
    Ok(DeviationRate {
        value: (phi_hat - phi_pi) / der.f_y,
        phi_hat,
        phi_pi,
        f_y: der.f_y,
        quantile: g,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ZeroInvestmentShift {
    /// `F` of the deviated strategy at the status-quo wealth.
    pub cdf_at_status_quo: f64,
    /// Whether the deviated α-quantile is still at or below the status quo.
    pub quantile_not_above: bool,
    /// Largest `ε*` such that every `ε ≤ ε*` keeps the quantile at or below
    /// the status quo; `None` when that holds up to the horizon.
    pub threshold: Option<f64>,
}

/// Effect of holding `π` on `[t, t+ε)` and nothing afterwards: terminal
/// wealth is then Gaussian around the status quo `x₀`, with
/// `F(x₀) = Φ(−∫bᵀπ/√∫‖σᵀπ‖²)`.
pub fn zero_investment_quantile_shift(
    alpha: f64,
    pi: &DVector<f64>,
    t: f64,
    eps: f64,
    model: &MarketModel,
) -> Result<ZeroInvestmentShift, QuantileError> {
    check_level(alpha)?;
    let horizon = model.horizon();
    if !(t >= 0.0 && eps > 0.0 && t + eps <= horizon + 1e-12) {
        return Err(QuantileError::InvalidHorizon { t, horizon: t + eps });
    }
    let ratio = |e: f64| -> Option<f64> {
        let mean = integrate_market(model, t, t + e, |s| model.b_at(s).dot(pi));
        let var = integrate_market(model, t, t + e, |s| {
            (model.sigma_at(s).transpose() * pi).norm_squared()
        });
        (var > 0.0).then(|| mean / var.sqrt())
    };
    let r = ratio(eps).ok_or(QuantileError::ZeroDeviation)?;
    let cdf_at_status_quo = normal::cdf(-r);
    // quantile ≤ x₀ iff F(x₀) ≥ α iff ratio ≤ −Φ⁻¹(α)
    let bound = -normal::inv_cdf(alpha);
    let ok = |e: f64| ratio(e).map_or(true, |r| r <= bound);

    let span = horizon - t;
    let n = 2000;
    let mut threshold = None;
    let mut prev = 0.0;
    for i in 1..=n {
        let e = span * i as f64 / n as f64;
        if !ok(e) {
            let (mut lo, mut hi) = (prev, e);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if ok(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo <= 1e-15 * hi {
                    break;
                }
            }
            threshold = Some(lo);
            break;
        }
        prev = e;
    }
    Ok(ZeroInvestmentShift {
        cdf_at_status_quo,
        quantile_not_above: cdf_at_status_quo >= alpha,
        threshold,
    })
}

/// Median of the pre-committed strategy's terminal wealth from `(t, x)`.
///
/// The terminal law is two-point `{ξ, ξ+k*}`; the upper value is the
/// median exactly when `x` is at or above `ξ + k*Φ(−√V(t))`.
pub fn precommitted_median(
    state: &PreCommittedState,
    t: f64,
    x: f64,
    remaining_variance: f64,
) -> Result<f64, QuantileError> {
    if !(x > state.xi && x < state.cap()) {
        return Err(StrategyError::OutOfBand {
            x,
            lo: state.xi,
            hi: state.cap(),
        }
        .into());
    }
    if t < state.anchor_t {
        return Err(QuantileError::InvalidHorizon { t, horizon: state.anchor_t });
    }
    Ok(if x >= precommitted_midpoint(state, remaining_variance) {
        state.cap()
    } else {
        state.xi
    })
}

/// Wealth at which the pre-committed driving integral is zero.
pub fn precommitted_midpoint(state: &PreCommittedState, remaining_variance: f64) -> f64 {
    state.xi + state.k_star * normal::cdf(-remaining_variance.max(0.0).sqrt())
}

/// `ã_t = e^{−V_t/2}/Φ(−√V₀)`: the pre-committed median is at least the
/// equilibrium median for `x` between the midpoint and `ξ + (x₀ − ξ)ã_t`.
pub fn precommitted_vs_equilibrium_threshold(
    remaining_variance: f64,
    anchor_variance: f64,
) -> Result<f64, QuantileError> {
    if !(anchor_variance > 0.0) {
        return Err(QuantileError::DegenerateVariance);
    }
    Ok((-0.5 * remaining_variance).exp() / normal::cdf(-anchor_variance.sqrt()))
}

/// Median of the naive strategy's wealth at `tau < T` from `(t, x)`:
/// `ξ + (x − ξ)exp(∫_t^τ(Δ_na − ½Δ_na²)‖σᵀv*‖² ds)`.
pub fn naive_running_median(
    xi: f64,
    t: f64,
    x: f64,
    tau: f64,
    kelly: &KellyCurve,
) -> Result<f64, QuantileError> {
    if !(x > xi) {
        return Err(QuantileError::BelowFloor { x, floor: xi });
    }
    if !(tau >= t && t >= 0.0) {
        return Err(QuantileError::InvalidHorizon { t, horizon: tau });
    }
    if tau >= kelly.horizon() {
        return Err(QuantileError::HorizonContact);
    }
    let (mean, _) = naive_exponents(kelly.remaining_variance(t), kelly.remaining_variance(tau))?;
    Ok(xi + (x - xi) * mean.exp())
}

/// Weighted average of quantiles at several dates. `dates` are
/// `T₁ < … < T_N = T`; row `n` of `weights` (0-based) applies on
/// `[T_{n−1}, T_n)` and has one entry for each date from `T_n` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiTimeObjective {
    pub dates: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

impl MultiTimeObjective {
    pub fn new(dates: Vec<f64>, weights: Vec<Vec<f64>>) -> Result<Self, QuantileError> {
        let obj = Self { dates, weights };
        obj.check()?;
        Ok(obj)
    }

    /// Same weights over the remaining dates in every segment, renormalized.
    pub fn uniform_row(dates: Vec<f64>, w: &[f64]) -> Result<Self, QuantileError> {
        let n = dates.len();
        if w.len() != n {
            return Err(QuantileError::WeightRowMismatch(format!(
                "{} weights for {n} dates",
                w.len()
            )));
        }
        let weights = (0..n)
            .map(|row| {
                let total: f64 = w[row..].iter().sum();
                w[row..].iter().map(|v| v / total).collect()
            })
            .collect();
        Self::new(dates, weights)
    }

    fn check(&self) -> Result<(), QuantileError> {
        let n = self.dates.len();
        let mismatch = |msg: String| Err(QuantileError::WeightRowMismatch(msg));
        if n == 0 {
            return mismatch("no dates".into());
        }
        if self.dates[0] <= 0.0 || self.dates.windows(2).any(|w| w[1] <= w[0]) {
            return mismatch("dates must be positive and strictly increasing".into());
        }
        if self.weights.len() != n {
            return mismatch(format!("{} weight rows for {n} dates", self.weights.len()));
        }
        for (row, w) in self.weights.iter().enumerate() {
            if w.len() != n - row {
                return mismatch(format!("row {row} has {} entries, expected {}", w.len(), n - row));
            }
            if w.iter().any(|v| !(*v >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return mismatch(format!("row {row} must be nonnegative and sum to one"));
            }
            if !(w[w.len() - 1] > 0.0) {
                return mismatch(format!("row {row} puts no weight on the final date"));
            }
        }
        Ok(())
    }

    /// Index of the weight row in force at `t`.
    pub fn active_row(&self, t: f64) -> Option<usize> {
        self.dates.iter().position(|&d| t < d)
    }

    /// `(date, weight)` pairs in force at `t`.
    pub fn active_terms(&self, t: f64) -> Result<Vec<(f64, f64)>, QuantileError> {
        let row = self.active_row(t).ok_or_else(|| {
            QuantileError::WeightRowMismatch(format!("t = {t} is past the last date"))
        })?;
        Ok(self.dates[row..]
            .iter()
            .copied()
            .zip(self.weights[row].iter().copied())
            .collect())
    }
}

/// `J = Σ_i w_{n,i} G(t, x, α; T_i)` with closed-form quantiles.
pub fn multi_time_objective(
    obj: &MultiTimeObjective,
    strategy: &Strategy,
    kelly: &KellyCurve,
    t: f64,
    x: f64,
    alpha: f64,
) -> Result<f64, QuantileError> {
    if (obj.dates[obj.dates.len() - 1] - kelly.horizon()).abs() > 1e-12 {
        return Err(QuantileError::WeightRowMismatch(
            "last date must equal the market horizon".into(),
        ));
    }
    obj.active_terms(t)?
        .into_iter()
        .filter(|&(_, w)| w > 0.0)
        .map(|(date, w)| Ok(w * quantile(strategy, kelly, t, x, alpha, date)?))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kelly::{default_grid, kelly_curve};
    use crate::market::ConeConstraint;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn benchmark() -> KellyCurve {
        let m = MarketModel::constant(
            1.0,
            &[0.08],
            DMatrix::from_element(1, 1, 0.2),
            ConeConstraint::unconstrained(1),
        )
        .unwrap();
        kelly_curve(&m, &default_grid(&m, 0.05)).unwrap()
    }

    #[test]
    fn equilibrium_median_examples() {
        assert_relative_eq!(
            median_equilibrium(60.0, 100.0, 0.16).unwrap(),
            60.0 + 40.0 * 0.08f64.exp(),
            max_relative = 1e-15
        );
        assert_eq!(median_equilibrium(60.0, 100.0, 0.0).unwrap(), 100.0);
        assert!(median_equilibrium(60.0, 60.0, 0.16).is_err());
        assert!((median_equilibrium(60.0, 60.0 + 1e-9, 0.16).unwrap() - 60.0).abs() < 1e-8);
    }

    #[test]
    fn fractional_kelly_median_examples() {
        assert_relative_eq!(
            median_fractional_kelly(1.0, 100.0, 0.16).unwrap(),
            108.328_706_767_495_85,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            median_fractional_kelly(0.5, 100.0, 0.16).unwrap(),
            106.183_654_654_535_96,
            max_relative = 1e-14
        );
        assert_eq!(median_fractional_kelly(2.0, 100.0, 0.16).unwrap(), 100.0);
        assert_eq!(
            median_fractional_kelly(0.5, 0.0, 0.16),
            Err(QuantileError::NonPositiveWealth(0.0))
        );
    }

    #[test]
    fn crossover_value() {
        let a = crossover_a(0.5, 0.16).unwrap();
        assert_relative_eq!(a, 3.882_752_646_043_326_6, max_relative = 1e-12);
        assert!(crossover_a(0.999, 0.16).unwrap() > 1e3);
        assert_eq!(crossover_a(0.5, 0.0), Err(QuantileError::DegenerateVariance));
    }

    #[test]
    fn constant_proportion_quantile() {
        let k = benchmark();
        let v = DVector::from_vec(vec![2.0]);
        let q = quantile_constant_proportion(&v, 0.25, 0.0, k.market()).unwrap();
        assert_relative_eq!(q, 0.08 + 0.4 * -0.674_489_750_196_081_7, max_relative = 1e-12);
        let zero = DVector::zeros(1);
        assert_eq!(quantile_constant_proportion(&zero, 0.1, 0.0, k.market()).unwrap(), 0.0);
        let q = quantile_constant_proportion(&v, 0.5, 0.5, k.market()).unwrap();
        assert_relative_eq!(q, 0.04, max_relative = 1e-12);
    }

    #[test]
    fn f_at_the_median() {
        let v = 0.16;
        let med = median_equilibrium(60.0, 100.0, v).unwrap();
        let der = equilibrium_f_and_derivatives(60.0, 100.0, med, v).unwrap();
        assert_relative_eq!(der.f, 0.5, epsilon = 1e-15);
        let want_fx = -normal::PDF_AT_ZERO / (0.4 * 40.0);
        assert_relative_eq!(der.f_x, want_fx, max_relative = 1e-13);
        assert_relative_eq!(der.f_xx, -want_fx / 40.0, max_relative = 1e-12);
        let below = equilibrium_f_and_derivatives(60.0, 100.0, 59.0, v).unwrap();
        assert_eq!(below.f, 0.0);
        assert_eq!(below.f_y, 0.0);
    }

    #[test]
    fn f_derivatives_match_finite_differences() {
        let h = 1e-4;
        for &(x, y, v) in &[(100.0, 103.0, 0.16), (75.0, 90.0, 0.05), (200.0, 150.0, 0.4)] {
            let f = |x: f64, y: f64| equilibrium_f_and_derivatives(60.0, x, y, v).unwrap();
            let d = f(x, y);
            let fx = (f(x + h, y).f - f(x - h, y).f) / (2.0 * h);
            let fxx = (f(x + h, y).f - 2.0 * d.f + f(x - h, y).f) / (h * h);
            let fy = (f(x, y + h).f - f(x, y - h).f) / (2.0 * h);
            assert_relative_eq!(d.f_x, fx, max_relative = 1e-6);
            assert_relative_eq!(d.f_xx, fxx, max_relative = 1e-3);
            assert_relative_eq!(d.f_y, fy, max_relative = 1e-6);
        }
    }

    #[test]
    fn deviation_rate_signs() {
        let k = benchmark();
        let eq = Strategy::Equilibrium { xi: 60.0 };
        let hat = eq.allocation(&k, 0.0, 100.0).unwrap();
        let zero = deviation_rate(&eq, 0.5, 0.0, 100.0, &hat, &k).unwrap();
        assert_eq!(zero.value, 0.0);
        for c in [2.0, 0.5, 0.0, -1.0] {
            let r = deviation_rate(&eq, 0.5, 0.0, 100.0, &(&hat * c), &k).unwrap();
            assert!(r.value < 0.0, "c = {c}: {}", r.value);
        }
    }

    #[test]
    fn deviation_rate_closed_form_along_kelly_ray() {
        // for π = c(x−ξ)v* at the median the rate is −q(c−1)²/2·(x−ξ)e^{V/2}
        let k = benchmark();
        let eq = Strategy::Equilibrium { xi: 60.0 };
        let hat = eq.allocation(&k, 0.25, 90.0).unwrap();
        let v = k.remaining_variance(0.25);
        for c in [0.0, 0.5, 1.5, 3.0] {
            let r = deviation_rate(&eq, 0.5, 0.25, 90.0, &(&hat * c), &k).unwrap();
            let want = -0.16 * (c - 1.0) * (c - 1.0) / 2.0 * 30.0 * (0.5 * v).exp();
            assert_relative_eq!(r.value, want, max_relative = 1e-10);
        }
    }

    #[test]
    fn deviation_rate_unsupported() {
        let k = benchmark();
        let zi = Strategy::zero_investment(1, 1.0, 100.0);
        let pi = DVector::from_vec(vec![1.0]);
        assert_eq!(
            deviation_rate(&zi, 0.4, 0.0, 100.0, &pi, &k),
            Err(QuantileError::UnsupportedStrategy("zero_investment"))
        );
    }

    #[test]
    fn zero_investment_threshold() {
        // bᵀπ/‖σᵀπ‖ = 0.4 with π = 1: b = 0.08, σ = 0.2
        let k = benchmark();
        let pi = DVector::from_vec(vec![1.0]);
        let shift = zero_investment_quantile_shift(0.4, &pi, 0.0, 0.01, k.market()).unwrap();
        assert!(shift.quantile_not_above);
        let eps_star = shift.threshold.unwrap();
        let want = (normal::inv_cdf(0.4) / 0.4).powi(2);
        assert_relative_eq!(eps_star, want, max_relative = 1e-9);
        assert_relative_eq!(eps_star, 0.401_154_716_670_635, max_relative = 1e-9);
        let late = zero_investment_quantile_shift(0.4, &pi, 0.0, 0.5, k.market()).unwrap();
        assert!(!late.quantile_not_above);
        let short = zero_investment_quantile_shift(0.4, &(-pi), 0.0, 0.5, k.market()).unwrap();
        assert!(short.quantile_not_above);
        assert_eq!(short.threshold, None);
        assert_eq!(
            zero_investment_quantile_shift(0.4, &DVector::zeros(1), 0.0, 0.1, k.market()),
            Err(QuantileError::ZeroDeviation)
        );
    }

    #[test]
    fn precommitted_medians() {
        let k = benchmark();
        let state = PreCommittedState::new(60.0, 0.0, 100.0, &k).unwrap();
        let v0 = k.remaining_variance(0.0);
        assert_relative_eq!(
            precommitted_median(&state, 0.0, 100.0, v0).unwrap(),
            176.083_934_566_657_7,
            max_relative = 1e-12
        );
        let v = k.remaining_variance(0.3);
        assert_eq!(precommitted_median(&state, 0.3, 90.0, v).unwrap(), 60.0);
        assert_eq!(precommitted_median(&state, 0.3, 110.0, v).unwrap(), state.cap());
        assert!(precommitted_median(&state, 0.3, 200.0, v).is_err());
        // the generic law gives the same medians
        let pc = Strategy::PreCommitted {
            xi: 60.0,
            anchor_t: 0.0,
            anchor_x: 100.0,
        };
        for x in [70.0, 90.0, 102.0, 104.0, 150.0] {
            let g = quantile(&pc, &k, 0.3, x, 0.5, 1.0).unwrap();
            assert_eq!(g, precommitted_median(&state, 0.3, x, v).unwrap(), "x = {x}");
        }
    }

    #[test]
    fn a_tilde_example() {
        let a = precommitted_vs_equilibrium_threshold(0.08, 0.16).unwrap();
        assert_relative_eq!(a, (-0.04f64).exp() / 0.344_578_258_389_675_83, max_relative = 1e-14);
        assert!(a > 1.0 && a < 1.0 / 0.344_578_258_389_675_83);
        assert_relative_eq!(
            precommitted_vs_equilibrium_threshold(0.0, 0.16).unwrap(),
            1.0 / 0.344_578_258_389_675_83,
            max_relative = 1e-14
        );
    }

    #[test]
    fn naive_median_is_x_at_start_and_decreases() {
        let k = benchmark();
        assert_eq!(naive_running_median(60.0, 0.0, 100.0, 0.0, &k).unwrap(), 100.0);
        let mut prev = 100.0;
        for tau in [0.5, 0.9, 0.99, 0.999, 0.9999] {
            let m = naive_running_median(60.0, 0.0, 100.0, tau, &k).unwrap();
            assert!(m < prev);
            prev = m;
        }
        assert_eq!(
            naive_running_median(60.0, 0.0, 100.0, 1.0, &k),
            Err(QuantileError::HorizonContact)
        );
    }

    #[test]
    fn naive_exponent_matches_direct_quadrature() {
        // integrate in s directly away from the horizon
        let (mean, var) = naive_exponents(0.16, 0.16 * 0.5).unwrap();
        let direct = |g: &dyn Fn(f64) -> f64| {
            simpson_refined(|s| g(naive_delta(0.16 * (1.0 - s)).unwrap()) * 0.16, 0.0, 0.5, 1e-13)
        };
        assert_relative_eq!(mean, direct(&|d| d - 0.5 * d * d), max_relative = 1e-10);
        assert_relative_eq!(var, direct(&|d| d * d), max_relative = 1e-10);
    }

    #[test]
    fn multi_time_example() {
        let k = benchmark();
        let obj = MultiTimeObjective::new(vec![0.5, 1.0], vec![vec![0.5, 0.5], vec![1.0]]).unwrap();
        let eq = Strategy::Equilibrium { xi: 60.0 };
        let j = multi_time_objective(&obj, &eq, &k, 0.0, 100.0, 0.5).unwrap();
        let want = 0.5 * (60.0 + 40.0 * 0.04f64.exp()) + 0.5 * (60.0 + 40.0 * 0.08f64.exp());
        assert_relative_eq!(j, want, max_relative = 1e-13);
        assert_relative_eq!(j, 102.481_9, max_relative = 1e-6);
        let late = multi_time_objective(&obj, &eq, &k, 0.6, 100.0, 0.5).unwrap();
        assert_relative_eq!(late, median_equilibrium(60.0, 100.0, 0.064).unwrap(), max_relative = 1e-12);

        let single = MultiTimeObjective::new(vec![1.0], vec![vec![1.0]]).unwrap();
        assert_relative_eq!(
            multi_time_objective(&single, &eq, &k, 0.0, 100.0, 0.5).unwrap(),
            median_equilibrium(60.0, 100.0, 0.16).unwrap(),
            max_relative = 1e-13
        );
        assert!(MultiTimeObjective::new(vec![0.5, 1.0], vec![vec![0.5, 0.4], vec![1.0]]).is_err());
        assert!(MultiTimeObjective::new(vec![0.5, 1.0], vec![vec![1.0, 0.0], vec![1.0]]).is_err());
        assert!(MultiTimeObjective::new(vec![0.5, 1.0], vec![vec![1.0]]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn lower_floor_gives_higher_median(xi1 in 0.0f64..50.0, gap in 0.1f64..40.0, v in 0.01f64..1.0) {
            let xi2 = xi1 + gap;
            let x = xi2 + 10.0;
            proptest::prop_assert!(median_equilibrium(xi1, x, v).unwrap() > median_equilibrium(xi2, x, v).unwrap());
        }

        #[test]
        fn quantile_inverts_cdf(alpha in 0.01f64..0.99, v in 0.01f64..1.0, x in 61.0f64..500.0) {
            let law = FloorLognormal::new(60.0, x, 0.5 * v, v.sqrt()).unwrap();
            let g = law.quantile(alpha);
            proptest::prop_assert!((law.cdf(g) - alpha).abs() < 1e-12);
        }

        #[test]
        fn crossover_separates_medians(gamma in 0.05f64..0.95, v in 0.02f64..1.0) {
            let a = crossover_a(gamma, v).unwrap();
            proptest::prop_assert!(a > 1.0);
            let xi = 60.0;
            let fk = |x: f64| median_fractional_kelly(gamma, x, v).unwrap();
            let eq = |x: f64| median_equilibrium(xi, x, v).unwrap();
            proptest::prop_assert!(fk(a * xi * 0.99) > eq(a * xi * 0.99));
            proptest::prop_assert!(fk(a * xi * 1.01) < eq(a * xi * 1.01));
        }
    }
}
