//! Deterministic-coefficient market: risk-free rate, excess mean returns,
//! volatility loadings and a polyhedral cone of admissible portfolios.

use crate::curve::{merge_breakpoints, CurveError, CurveSpec, PiecewiseCurve};
use crate::kelly::{self, KellyCurve, QpInstance};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Smallest eigenvalue of `σσᵀ` accepted as uniformly elliptic.
pub const MIN_EIGENVALUE: f64 = 1e-8;

/// One trading day, the default validation resolution.
pub const DEFAULT_GRID_STEP: f64 = 1.0 / 252.0;

#[derive(Debug, Error)]
pub enum MarketError {
    #[error("horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("grid step must be positive, got {0}")]
    InvalidGridStep(f64),
    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },
    #[error(transparent)]
    Curve(#[from] CurveError),
    #[error("invalid market definition: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Kelly(#[from] kelly::KellyError),
}

/// Admissible portfolios satisfy `Qπ ≥ 0` componentwise. Zero rows means
/// no constraint.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeConstraint {
    q: DMatrix<f64>,
}

impl ConeConstraint {
    pub fn new(q: DMatrix<f64>) -> Result<Self, MarketError> {
        if q.iter().any(|x| !x.is_finite()) {
            return Err(MarketError::DimensionMismatch(
                "constraint matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { q })
    }

    pub fn unconstrained(assets: usize) -> Self {
        Self {
            q: DMatrix::zeros(0, assets),
        }
    }

    /// No short sales: `Q = I`.
    pub fn long_only(assets: usize) -> Self {
        Self {
            q: DMatrix::identity(assets, assets),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn rows(&self) -> usize {
        self.q.nrows()
    }

    /// Smallest entry of `Qπ`, or `+inf` without constraints.
    pub fn min_slack(&self, pi: &DVector<f64>) -> f64 {
        if self.q.nrows() == 0 {
            return f64::INFINITY;
        }
        (&self.q * pi).min()
    }

    pub fn admits(&self, pi: &DVector<f64>, tol: f64) -> bool {
        self.min_slack(pi) >= -tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketModel {
    horizon: f64,
    assets: usize,
    factors: usize,
    rate: PiecewiseCurve,
    excess_return: PiecewiseCurve,
    volatility: PiecewiseCurve,
    constraint: ConeConstraint,
    // rate moved into the numeraire by `discount_normalize`
    discounted_rate: Option<PiecewiseCurve>,
}

impl MarketModel {
    pub fn new(
        horizon: f64,
        rate: PiecewiseCurve,
        excess_return: PiecewiseCurve,
        volatility: PiecewiseCurve,
        constraint: ConeConstraint,
    ) -> Result<Self, MarketError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(MarketError::NonPositiveHorizon(horizon));
        }
        let (assets, one) = excess_return.shape();
        if one != 1 || assets == 0 {
            return Err(MarketError::DimensionMismatch(format!(
                "excess return must be an m-vector, got shape {:?}",
                excess_return.shape()
            )));
        }
        let (vr, factors) = volatility.shape();
        if vr != assets || factors == 0 {
            return Err(MarketError::DimensionMismatch(format!(
                "volatility must be {assets}×d, got {:?}",
                volatility.shape()
            )));
        }
        if rate.shape() != (1, 1) {
            return Err(MarketError::DimensionMismatch("rate must be scalar".into()));
        }
        if constraint.q.ncols() != assets {
            return Err(MarketError::DimensionMismatch(format!(
                "constraint matrix has {} columns, expected {assets}",
                constraint.q.ncols()
            )));
        }
        for curve in [&rate, &excess_return, &volatility] {
            if (curve.horizon() - horizon).abs() > 1e-12 {
                return Err(MarketError::DimensionMismatch(format!(
                    "curve ends at {} but horizon is {horizon}",
                    curve.horizon()
                )));
            }
        }
        Ok(Self {
            horizon,
            assets,
            factors,
            rate,
            excess_return,
            volatility,
            constraint,
            discounted_rate: None,
        })
    }

    /// Constant coefficients with zero interest rate.
    pub fn constant(
        horizon: f64,
        excess_return: &[f64],
        volatility: DMatrix<f64>,
        constraint: ConeConstraint,
    ) -> Result<Self, MarketError> {
        if !(horizon > 0.0) {
            return Err(MarketError::NonPositiveHorizon(horizon));
        }
        Self::new(
            horizon,
            PiecewiseCurve::scalar(0.0, horizon)?,
            PiecewiseCurve::vector(excess_return, horizon)?,
            PiecewiseCurve::constant(volatility, horizon)?,
            constraint,
        )
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn assets(&self) -> usize {
        self.assets
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn rate(&self) -> &PiecewiseCurve {
        &self.rate
    }

    pub fn excess_return(&self) -> &PiecewiseCurve {
        &self.excess_return
    }

    pub fn volatility(&self) -> &PiecewiseCurve {
        &self.volatility
    }

    pub fn constraint(&self) -> &ConeConstraint {
        &self.constraint
    }

    pub fn b_at(&self, t: f64) -> DVector<f64> {
        self.excess_return.eval(t).column(0).into_owned()
    }

    pub fn sigma_at(&self, t: f64) -> DMatrix<f64> {
        self.volatility.eval(t)
    }

    pub fn b_left(&self, t: f64) -> DVector<f64> {
        self.excess_return.left_limit(t).column(0).into_owned()
    }

    pub fn sigma_left(&self, t: f64) -> DMatrix<f64> {
        self.volatility.left_limit(t)
    }

    /// Kelly QP data at `t`, or at its left limit.
    pub fn qp_at(&self, t: f64, left_limit: bool) -> QpInstance {
        let (b, sigma) = if left_limit {
            (self.b_left(t), self.sigma_left(t))
        } else {
            (self.b_at(t), self.sigma_at(t))
        };
        QpInstance::new(&sigma * sigma.transpose(), b, self.constraint.q.clone())
    }

    /// Breakpoints of `b` and `σ`, the curves that determine the Kelly
    /// portfolio.
    pub fn coefficient_breakpoints(&self) -> Vec<f64> {
        merge_breakpoints([
            self.excess_return.breakpoints(),
            self.volatility.breakpoints(),
        ])
    }

    /// True when `b` and `σ` are both constant on the coefficient segment
    /// containing `t`.
    pub fn is_constant_near(&self, t: f64) -> bool {
        self.excess_return
            .is_constant_segment(self.excess_return.segment_index(t))
            && self
                .volatility
                .is_constant_segment(self.volatility.segment_index(t))
    }

    pub fn is_piecewise_constant(&self) -> bool {
        self.excess_return.is_piecewise_constant() && self.volatility.is_piecewise_constant()
    }

    /// Move the risk-free rate into the numeraire: the returned model has
    /// `r ≡ 0` and the same `b`, `σ`, and remembers the removed rate so that
    /// `discount_factor` can convert discounted wealth back.
    pub fn discount_normalize(&self) -> MarketModel {
        if self.rate.is_identically_zero() {
            return self.clone();
        }
        let mut out = self.clone();
        out.discounted_rate = Some(self.rate.clone());
        out.rate = PiecewiseCurve::scalar(0.0, self.horizon).expect("positive horizon");
        out
    }

    /// `exp(-∫₀ˢ r(u) du)` for the rate removed by `discount_normalize`
    /// (or the model's own rate if it has not been normalized).
    pub fn discount_factor(&self, s: f64) -> Result<f64, MarketError> {
        if !(0.0..=self.horizon).contains(&s) {
            return Err(MarketError::OutOfRange {
                t: s,
                horizon: self.horizon,
            });
        }
        let curve = self.discounted_rate.as_ref().unwrap_or(&self.rate);
        Ok((-curve.integrate_scalar(0.0, s)?).exp())
    }

    pub fn is_discount_normalized(&self) -> bool {
        self.rate.is_identically_zero()
    }

    pub fn from_json(text: &str) -> Result<Self, MarketError> {
        let spec: MarketSpec = serde_json::from_str(text)?;
        spec.build()
    }

    pub fn to_spec(&self) -> MarketSpec {
        MarketSpec {
            horizon: self.horizon,
            assets: self.assets,
            factors: self.factors,
            constraint_matrix: self
                .constraint
                .q
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            r: Some(CurveSpec::from_curve(&self.rate)),
            b: CurveSpec::from_curve(&self.excess_return),
            sigma: CurveSpec::from_curve(&self.volatility),
        }
    }
}

/// JSON market definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarketSpec {
    pub horizon: f64,
    pub assets: usize,
    pub factors: usize,
    /// Row-major, either nested rows or a flat list of length `n·m`.
    #[serde(default, deserialize_with = "de_constraint")]
    pub constraint_matrix: Vec<Vec<f64>>,
    #[serde(default)]
    pub r: Option<CurveSpec>,
    #[serde(alias = "excess_return")]
    pub b: CurveSpec,
    #[serde(alias = "volatility")]
    pub sigma: CurveSpec,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConstraintInput {
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

fn de_constraint<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<Vec<f64>>, D::Error> {
    Ok(match ConstraintInput::deserialize(d)? {
        ConstraintInput::Rows(r) => r,
        // reshaped once the asset count is known
        ConstraintInput::Flat(f) if f.is_empty() => Vec::new(),
        ConstraintInput::Flat(f) => vec![f],
    })
}

impl MarketSpec {
    pub fn build(&self) -> Result<MarketModel, MarketError> {
        if !(self.horizon > 0.0) {
            return Err(MarketError::NonPositiveHorizon(self.horizon));
        }
        let m = self.assets;
        let rows: Vec<Vec<f64>> =
            if self.constraint_matrix.len() == 1 && self.constraint_matrix[0].len() != m {
                let flat = &self.constraint_matrix[0];
                if m == 0 || flat.len() % m != 0 {
                    return Err(MarketError::DimensionMismatch(format!(
                        "flat constraint matrix of length {} is not a multiple of {m}",
                        flat.len()
                    )));
                }
                flat.chunks(m).map(<[f64]>::to_vec).collect()
            } else {
                self.constraint_matrix.clone()
            };
        if rows.iter().any(|r| r.len() != m) {
            return Err(MarketError::DimensionMismatch(format!(
                "constraint rows must have {m} entries"
            )));
        }
        let q = DMatrix::from_row_iterator(rows.len(), m, rows.iter().flatten().copied());
        let rate = match &self.r {
            Some(spec) => spec.build((1, 1), self.horizon)?,
            None => PiecewiseCurve::scalar(0.0, self.horizon)?,
        };
        let b = self
            .b
            .build((m, 1), self.horizon)
            .map_err(|e| shape_context("b", e))?;
        let sigma = self
            .sigma
            .build((m, self.factors), self.horizon)
            .map_err(|e| shape_context("sigma", e))?;
        MarketModel::new(self.horizon, rate, b, sigma, ConeConstraint::new(q)?)
    }
}

fn shape_context(name: &str, e: CurveError) -> MarketError {
    match e {
        CurveError::ShapeMismatch { expected, found } => MarketError::DimensionMismatch(format!(
            "{name} has shape {found:?}, expected {expected:?}"
        )),
        other => other.into(),
    }
}

/// Which standing condition on the coefficients failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Violation {
    /// `b(t) = 0`.
    ZeroExcessReturn,
    /// `σσᵀ` not uniformly positive definite.
    DegenerateVolatility,
    /// No `v` with `bᵀv > 0` and `Qv ≥ 0`.
    NoProfitableDirection,
}

impl Violation {
    pub fn code(self) -> &'static str {
        match self {
            Violation::ZeroExcessReturn => "zero-excess-return",
            Violation::DegenerateVolatility => "degenerate-volatility",
            Violation::NoProfitableDirection => "no-profitable-direction",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let text = match self {
            Violation::ZeroExcessReturn => "excess return vector b(t) vanishes",
            Violation::DegenerateVolatility => "sigma sigma^T is not uniformly positive definite",
            Violation::NoProfitableDirection => {
                "no admissible portfolio v with b(t)^T v > 0 and Qv >= 0"
            }
        };
        write!(f, "{} ({text})", self.code())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridCheck {
    pub t: f64,
    pub left_limit: bool,
    pub min_eigenvalue: f64,
    pub b_norm: f64,
    /// `bᵀv*` from the Kelly program; positive iff the cone condition holds.
    pub kelly_growth: f64,
    pub violation: Option<Violation>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationFailure {
    pub t: f64,
    pub left_limit: bool,
    pub violation: Violation,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub points: Vec<GridCheck>,
    pub passed: bool,
    pub first_failure: Option<ValidationFailure>,
}

/// Check the standing assumptions on a time grid of spacing `grid_step`,
/// at every coefficient breakpoint, and at left limits at breakpoints.
pub fn validate(model: &MarketModel, grid_step: f64) -> Result<ValidationReport, MarketError> {
    if !(grid_step > 0.0) {
        return Err(MarketError::InvalidGridStep(grid_step));
    }
    let mut probes: Vec<(f64, bool)> = Vec::new();
    let steps = (model.horizon / grid_step).ceil() as usize;
    for k in 0..steps {
        let t = k as f64 * grid_step;
        if t < model.horizon {
            probes.push((t, false));
        }
    }
    let bps = merge_breakpoints([
        model.excess_return.breakpoints(),
        model.volatility.breakpoints(),
        model.rate.breakpoints(),
    ]);
    for &t in &bps {
        if t < model.horizon {
            probes.push((t, false));
        }
        if t > 0.0 {
            probes.push((t, true));
        }
    }
    probes.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(b.1.cmp(&a.1)));
    probes.dedup_by(|a, b| (a.0 - b.0).abs() <= 1e-12 && a.1 == b.1);

    let points: Vec<GridCheck> = probes
        .iter()
        .map(|&(t, left)| check_point(model, t, left))
        .collect();
    let first_failure = points.iter().find_map(|p| {
        p.violation.map(|violation| ValidationFailure {
            t: p.t,
            left_limit: p.left_limit,
            violation,
        })
    });
    Ok(ValidationReport {
        passed: first_failure.is_none(),
        points,
        first_failure,
    })
}

fn check_point(model: &MarketModel, t: f64, left: bool) -> GridCheck {
    let qp = model.qp_at(t, left);
    let b_norm = qp.b.norm();
    let min_eigenvalue = SymmetricEigen::new(qp.sigma.clone()).eigenvalues.min();
    let kelly_growth = if min_eigenvalue > 0.0 {
        kelly::solve_qp(&qp, kelly::DEFAULT_TOL)
            .map(|s| qp.b.dot(&s.v_star))
            .unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    let violation = if b_norm == 0.0 {
        Some(Violation::ZeroExcessReturn)
    } else if !(min_eigenvalue >= MIN_EIGENVALUE) {
        Some(Violation::DegenerateVolatility)
    } else if !(kelly_growth > 1e-14 * b_norm.max(1.0)) {
        Some(Violation::NoProfitableDirection)
    } else {
        None
    };
    GridCheck {
        t,
        left_limit: left,
        min_eigenvalue,
        b_norm,
        kelly_growth,
        violation,
    }
}

/// `∫ₜˢ ‖σ(τ)ᵀv*(τ)‖² dτ`.
pub fn integrate_squared_kelly_vol(
    model: &MarketModel,
    kelly: &KellyCurve,
    t: f64,
    s: f64,
) -> Result<f64, MarketError> {
    for x in [t, s] {
        if !(0.0..=model.horizon).contains(&x) {
            return Err(MarketError::OutOfRange {
                t: x,
                horizon: model.horizon,
            });
        }
    }
    if s < t {
        return Err(MarketError::OutOfRange {
            t: s,
            horizon: model.horizon,
        });
    }
    Ok(kelly.integrated_variance(t, s))
}
