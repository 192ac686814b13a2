//! Markovian portfolio rules `(t, x) ↦ π`, in dollars per risky asset.

use crate::curve::{merge_breakpoints, CurveError, CurveSpec, PiecewiseCurve};
use crate::kelly::KellyCurve;
use crate::market::MarketModel;
use crate::normal;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Componentwise tolerance when comparing user curves with `v*`.
pub const CURVE_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("wealth {x} is below the insurance floor {floor}")]
    BelowFloor { x: f64, floor: f64 },
    #[error("time {t} is outside [0, {horizon})")]
    HorizonReached { t: f64, horizon: f64 },
    #[error("remaining Kelly variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("wealth {x} outside the pre-committed band ({lo}, {hi})")]
    OutOfBand { x: f64, lo: f64, hi: f64 },
    #[error("could not bracket the pre-committed state variable")]
    BracketFailure,
    #[error("invalid strategy parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Curve(#[from] CurveError),
}

/// `π(t, x) = θ₀(t) + θ₁(t)x`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStrategy {
    pub theta0: PiecewiseCurve,
    pub theta1: PiecewiseCurve,
}

impl AffineStrategy {
    pub fn new(theta0: PiecewiseCurve, theta1: PiecewiseCurve) -> Result<Self, StrategyError> {
        if theta0.shape() != theta1.shape() || theta0.shape().1 != 1 {
            return Err(StrategyError::InvalidParameter(format!(
                "affine coefficients must be vectors of equal length, got {:?} and {:?}",
                theta0.shape(),
                theta1.shape()
            )));
        }
        if (theta0.horizon() - theta1.horizon()).abs() > 1e-12 {
            return Err(StrategyError::InvalidParameter(
                "affine coefficients have different horizons".into(),
            ));
        }
        Ok(Self { theta0, theta1 })
    }

    pub fn intercept(&self, t: f64) -> DVector<f64> {
        self.theta0.eval(t).column(0).into_owned()
    }

    pub fn slope(&self, t: f64) -> DVector<f64> {
        self.theta1.eval(t).column(0).into_owned()
    }

    pub fn allocation(&self, t: f64, x: f64) -> DVector<f64> {
        self.intercept(t) + self.slope(t) * x
    }

    /// Union of both coefficient breakpoint sets.
    pub fn breakpoints(&self) -> Vec<f64> {
        merge_breakpoints([self.theta0.breakpoints(), self.theta1.breakpoints()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Strategy {
    /// Portfolio insurance at level `xi`: `π = v*(t)(x − ξ)`.
    Equilibrium { xi: f64 },
    /// `π = γ v*(t) x`.
    FractionalKelly { gamma: f64 },
    /// `π = c v*(t)(x − ξ)`; `c = 1` is the equilibrium.
    ScaledEquilibrium { xi: f64, scale: f64 },
    /// Median-optimal plan fixed at `(anchor_t, anchor_x)` with floor `xi`.
    PreCommitted { xi: f64, anchor_t: f64, anchor_x: f64 },
    /// Re-optimized at every instant without commitment.
    Naive { xi: f64 },
    /// `π = θ(t)(x − anchor_x)`; no risky holding at the anchor wealth.
    ZeroInvestment { theta: PiecewiseCurve, anchor_x: f64 },
    GeneralAffine(AffineStrategy),
}

impl Strategy {
    pub fn zero_investment(assets: usize, horizon: f64, anchor_x: f64) -> Self {
        Strategy::ZeroInvestment {
            theta: PiecewiseCurve::vector(&vec![0.0; assets], horizon)
                .expect("positive horizon"),
            anchor_x,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Equilibrium { .. } => "equilibrium",
            Strategy::FractionalKelly { .. } => "fractional_kelly",
            Strategy::ScaledEquilibrium { .. } => "scaled_equilibrium",
            Strategy::PreCommitted { .. } => "precommitted",
            Strategy::Naive { .. } => "naive",
            Strategy::ZeroInvestment { .. } => "zero_investment",
            Strategy::GeneralAffine(_) => "affine",
        }
    }

    /// Insurance floor for strategies that never let wealth reach it.
    pub fn floor(&self) -> Option<f64> {
        match self {
            Strategy::Equilibrium { xi }
            | Strategy::ScaledEquilibrium { xi, .. }
            | Strategy::PreCommitted { xi, .. }
            | Strategy::Naive { xi } => Some(*xi),
            _ => None,
        }
    }

    /// Parameter checks that depend on the initial wealth.
    pub fn check_initial(&self, x0: f64) -> Result<(), StrategyError> {
        match self {
            Strategy::Equilibrium { xi }
            | Strategy::ScaledEquilibrium { xi, .. }
            | Strategy::Naive { xi }
                if !(*xi < x0) =>
            {
                Err(StrategyError::InvalidParameter(format!(
                    "insurance level {xi} must lie below initial wealth {x0}"
                )))
            }
            Strategy::PreCommitted { xi, anchor_x, .. } if !(*xi < *anchor_x) => {
                Err(StrategyError::InvalidParameter(format!(
                    "insurance level {xi} must lie below anchor wealth {anchor_x}"
                )))
            }
            Strategy::FractionalKelly { gamma } if !(*gamma > 0.0) => Err(
                StrategyError::InvalidParameter(format!("gamma must be positive, got {gamma}")),
            ),
            Strategy::FractionalKelly { .. } if !(x0 > 0.0) => Err(
                StrategyError::InvalidParameter("fractional Kelly needs positive wealth".into()),
            ),
            _ => Ok(()),
        }
    }

    /// Dollar allocation at `(t, x)`.
    ///
    /// Insurance-type strategies are defined on `x > ξ`; at `x = ξ` the
    /// allocation is clamped to zero and `x < ξ` is rejected.
    pub fn allocation(
        &self,
        kelly: &KellyCurve,
        t: f64,
        x: f64,
    ) -> Result<DVector<f64>, StrategyError> {
        let horizon = kelly.horizon();
        if !(0.0..horizon).contains(&t) {
            return Err(StrategyError::HorizonReached { t, horizon });
        }
        let m = kelly.market().assets();
        if let Some(floor) = self.floor() {
            if x < floor {
                return Err(StrategyError::BelowFloor { x, floor });
            }
            if x == floor {
                return Ok(DVector::zeros(m));
            }
        }
        Ok(match self {
            Strategy::Equilibrium { xi } => kelly.v_star(t) * (x - xi),
            Strategy::FractionalKelly { gamma } => kelly.v_star(t) * (gamma * x),
            Strategy::ScaledEquilibrium { xi, scale } => kelly.v_star(t) * (scale * (x - xi)),
            Strategy::Naive { xi } => {
                let delta = naive_delta(kelly.remaining_variance(t))?;
                kelly.v_star(t) * (delta * (x - xi))
            }
            Strategy::PreCommitted {
                xi,
                anchor_t,
                anchor_x,
            } => {
                let state = PreCommittedState::new(*xi, *anchor_t, *anchor_x, kelly)?;
                let delta = precommitted_delta(&state, kelly, t, x)?;
                kelly.v_star(t) * (delta * (x - xi))
            }
            Strategy::ZeroInvestment { theta, anchor_x } => {
                theta.eval(t).column(0).into_owned() * (x - anchor_x)
            }
            Strategy::GeneralAffine(a) => a.allocation(t, x),
        })
    }
}

/// `Δ_na = φ(√V)/(√V Φ(−√V))` for remaining Kelly variance `V > 0`.
pub fn naive_delta(remaining_variance: f64) -> Result<f64, StrategyError> {
    if !(remaining_variance > 0.0) {
        return Err(StrategyError::NonPositiveVariance(remaining_variance));
    }
    let s = remaining_variance.sqrt();
    Ok(normal::inverse_mills(-s) / s)
}

/// Data fixed when the pre-committed plan is made at `(anchor_t, anchor_x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreCommittedState {
    pub xi: f64,
    pub anchor_t: f64,
    pub anchor_x: f64,
    /// `(x_a − ξ)/Φ(−√V(t_a))`; terminal wealth is `ξ` or `ξ + k*`.
    pub k_star: f64,
    /// `V(t_a) = ∫_{t_a}^T ‖σᵀv*‖²`.
    pub anchor_variance: f64,
}

impl PreCommittedState {
    pub fn new(
        xi: f64,
        anchor_t: f64,
        anchor_x: f64,
        kelly: &KellyCurve,
    ) -> Result<Self, StrategyError> {
        if !(anchor_x > xi) {
            return Err(StrategyError::BelowFloor {
                x: anchor_x,
                floor: xi,
            });
        }
        let v = kelly.remaining_variance(anchor_t);
        Self::from_variance(xi, anchor_t, anchor_x, v)
    }

    pub fn from_variance(
        xi: f64,
        anchor_t: f64,
        anchor_x: f64,
        anchor_variance: f64,
    ) -> Result<Self, StrategyError> {
        if !(anchor_variance > 0.0) {
            return Err(StrategyError::NonPositiveVariance(anchor_variance));
        }
        Ok(Self {
            xi,
            anchor_t,
            anchor_x,
            k_star: (anchor_x - xi) / normal::cdf(-anchor_variance.sqrt()),
            anchor_variance,
        })
    }

    pub fn cap(&self) -> f64 {
        self.xi + self.k_star
    }

    /// Wealth when the driving integral since the anchor equals `z`:
    /// `ξ + k* Φ(d(t, z))` with `d(t, z) = (z − V(t))/√V(t)`.
    pub fn wealth(&self, remaining_variance: f64, z: f64) -> f64 {
        if remaining_variance <= 0.0 {
            return if z >= 0.0 { self.cap() } else { self.xi };
        }
        let s = remaining_variance.sqrt();
        self.xi + self.k_star * normal::cdf((z - remaining_variance) / s)
    }

    /// Invert `wealth` by bisection on `z`.
    pub fn state_variable(&self, remaining_variance: f64, x: f64) -> Result<f64, StrategyError> {
        if !(x > self.xi && x < self.cap()) {
            return Err(StrategyError::OutOfBand {
                x,
                lo: self.xi,
                hi: self.cap(),
            });
        }
        if !(remaining_variance > 0.0) {
            return Err(StrategyError::NonPositiveVariance(remaining_variance));
        }
        let v = remaining_variance;
        let s = v.sqrt();
        let target = (x - self.xi) / self.k_star;
        let f = |z: f64| normal::cdf((z - v) / s) - target;
        let mut lo = v - 10.0 * s;
        let mut hi = v + 10.0 * s;
        let mut grow = 0;
        while f(lo) > 0.0 || f(hi) < 0.0 {
            let width = hi - lo;
            lo -= width;
            hi += width;
            grow += 1;
            if grow > 60 {
                return Err(StrategyError::BracketFailure);
            }
        }
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            let fm = f(mid);
            if fm == 0.0 {
                return Ok(mid);
            }
            if fm < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * (1.0 + mid.abs()) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Pre-committed exposure multiplier `Δ_pc(t, x)`, so that
/// `π = Δ_pc v*(t)(x − ξ)`.
pub fn precommitted_delta(
    state: &PreCommittedState,
    kelly: &KellyCurve,
    t: f64,
    x: f64,
) -> Result<f64, StrategyError> {
    let horizon = kelly.horizon();
    if !(t >= state.anchor_t && t < horizon) {
        return Err(StrategyError::HorizonReached { t, horizon });
    }
    precommitted_delta_with_variance(state, kelly.remaining_variance(t), x)
}

pub fn precommitted_delta_with_variance(
    state: &PreCommittedState,
    remaining_variance: f64,
    x: f64,
) -> Result<f64, StrategyError> {
    let z = state.state_variable(remaining_variance, x)?;
    let s = remaining_variance.sqrt();
    let d = (z - remaining_variance) / s;
    Ok(normal::inverse_mills(d) / s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum AffineClass {
    /// Portfolio insurance with the given floor.
    Equilibrium { xi: f64 },
    /// No risky holding along the reachable path from `x₀`.
    ZeroInvestment,
    NotEquilibrium,
}

/// Structural equilibrium test for an affine rule at quantile level `alpha`
/// and initial wealth `x0`, on the union of the Kelly grid and the rule's
/// breakpoints.
pub fn is_affine_equilibrium(
    strategy: &AffineStrategy,
    alpha: f64,
    x0: f64,
    kelly: &KellyCurve,
) -> Result<AffineClass, StrategyError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StrategyError::InvalidParameter(format!(
            "quantile level must be in (0, 1), got {alpha}"
        )));
    }
    let horizon = kelly.horizon();
    let grid: Vec<f64> = merge_breakpoints([kelly.grid(), &strategy.breakpoints()[..]])
        .into_iter()
        .filter(|t| *t < horizon)
        .collect();
    let close = |a: &DVector<f64>, b: &DVector<f64>| (a - b).amax() <= CURVE_TOL;

    if alpha > 0.5 {
        return Ok(AffineClass::NotEquilibrium);
    }
    if alpha < 0.5 {
        let zero = grid.iter().all(|&t| {
            let pi = strategy.allocation(t, x0);
            pi.amax() <= CURVE_TOL
        });
        return Ok(if zero {
            AffineClass::ZeroInvestment
        } else {
            AffineClass::NotEquilibrium
        });
    }

    let v0 = kelly.v_star(0.0);
    let xi = -strategy.intercept(0.0).dot(&v0) / v0.norm_squared();
    if !(xi < x0) {
        return Ok(AffineClass::NotEquilibrium);
    }
    let matches = grid.iter().all(|&t| {
        let v = kelly.v_star(t);
        close(&strategy.slope(t), &v) && close(&strategy.intercept(t), &(-&v * xi))
    });
    Ok(if matches {
        AffineClass::Equilibrium { xi }
    } else {
        AffineClass::NotEquilibrium
    })
}

/// JSON strategy definition, tagged by `kind`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategySpec {
    Equilibrium {
        xi: f64,
    },
    FractionalKelly {
        gamma: f64,
    },
    ScaledEquilibrium {
        xi: f64,
        scale: f64,
    },
    Precommitted {
        xi: f64,
        #[serde(default)]
        anchor_t: f64,
        #[serde(default)]
        anchor_x: Option<f64>,
    },
    Naive {
        xi: f64,
    },
    ZeroInvestment {
        #[serde(default)]
        theta: Option<CurveSpec>,
        #[serde(default)]
        anchor_x: Option<f64>,
    },
    Affine {
        theta0: CurveSpec,
        theta1: CurveSpec,
    },
}

impl StrategySpec {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Build against a market; `x0` fills anchors that the JSON omits.
    pub fn build(&self, market: &MarketModel, x0: f64) -> Result<Strategy, StrategyError> {
        let shape = (market.assets(), 1);
        let horizon = market.horizon();
        Ok(match self {
            StrategySpec::Equilibrium { xi } => Strategy::Equilibrium { xi: *xi },
            StrategySpec::FractionalKelly { gamma } => Strategy::FractionalKelly { gamma: *gamma },
            StrategySpec::ScaledEquilibrium { xi, scale } => Strategy::ScaledEquilibrium {
                xi: *xi,
                scale: *scale,
            },
            StrategySpec::Precommitted {
                xi,
                anchor_t,
                anchor_x,
            } => Strategy::PreCommitted {
                xi: *xi,
                anchor_t: *anchor_t,
                anchor_x: anchor_x.unwrap_or(x0),
            },
            StrategySpec::Naive { xi } => Strategy::Naive { xi: *xi },
            StrategySpec::ZeroInvestment { theta, anchor_x } => Strategy::ZeroInvestment {
                theta: match theta {
                    Some(spec) => spec.build(shape, horizon)?,
                    None => PiecewiseCurve::vector(&vec![0.0; shape.0], horizon)?,
                },
                anchor_x: anchor_x.unwrap_or(x0),
            },
            StrategySpec::Affine { theta0, theta1 } => Strategy::GeneralAffine(AffineStrategy::new(
                theta0.build(shape, horizon)?,
                theta1.build(shape, horizon)?,
            )?),
        })
    }
}
