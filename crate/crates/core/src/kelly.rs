//! Cone-constrained Kelly portfolio.
//!
//! At each time the Kelly fraction vector `v*` minimizes
//! `½ vᵀ(σσᵀ)v − bᵀv` subject to `Qv ≥ 0`. The program is strictly convex,
//! so a primal active-set method finds the exact minimizer together with
//! the multipliers needed for KKT diagnostics.

use crate::market::MarketModel;
use crate::quadrature::simpson_refined;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub const DEFAULT_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum KellyError {
    #[error("covariance matrix is not positive definite")]
    SingularSigma,
    #[error("active-set iteration did not converge after {0} steps")]
    MaxIterationsExceeded(usize),
    #[error("b'v* = |sigma'v*|^2 violated at t = {t} (residual {residual:e})")]
    IdentityViolation { t: f64, residual: f64 },
    #[error("Kelly portfolio degenerates (sigma'v* = 0) at t = {0}")]
    DegenerateKelly(f64),
    #[error("QP dimensions inconsistent: {0}")]
    DimensionMismatch(String),
    #[error("tolerance must be positive")]
    InvalidTolerance,
}

/// `min ½vᵀΣv − bᵀv  s.t.  Qv ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpInstance {
    pub sigma: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: DMatrix<f64>,
}

impl QpInstance {
    pub fn new(sigma: DMatrix<f64>, b: DVector<f64>, q: DMatrix<f64>) -> Self {
        Self { sigma, b, q }
    }

    pub fn objective(&self, v: &DVector<f64>) -> f64 {
        0.5 * v.dot(&(&self.sigma * v)) - self.b.dot(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResiduals {
    /// `‖Σv − b − Qᵀλ‖`
    pub stationarity: f64,
    /// `|λᵀQv|`
    pub complementarity: f64,
    /// `max(0, −min Qv)`
    pub primal: f64,
    /// `max(0, −min λ)`
    pub dual: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.complementarity)
            .max(self.primal)
            .max(self.dual)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub v_star: DVector<f64>,
    /// Binding rows of `Q`, ascending.
    pub active_set: Vec<usize>,
    /// One multiplier per row of `Q`; zero off the active set.
    pub multipliers: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub residuals: KktResiduals,
}

pub fn solve_qp(instance: &QpInstance, tol: f64) -> Result<QpSolution, KellyError> {
    solve_qp_from(instance, tol, &[])
}

/// Active-set solve starting from `v = 0` with the given working set. The
/// origin satisfies every cone constraint with equality, so any starting
/// set is feasible.
pub fn solve_qp_from(
    instance: &QpInstance,
    tol: f64,
    start_set: &[usize],
) -> Result<QpSolution, KellyError> {
    if !(tol > 0.0) {
        return Err(KellyError::InvalidTolerance);
    }
    let m = instance.b.len();
    let n = instance.q.nrows();
    if instance.sigma.shape() != (m, m) || instance.q.ncols() != m {
        return Err(KellyError::DimensionMismatch(format!(
            "Sigma {:?}, b {m}, Q {:?}",
            instance.sigma.shape(),
            instance.q.shape()
        )));
    }
    let chol = instance
        .sigma
        .clone()
        .cholesky()
        .ok_or(KellyError::SingularSigma)?;
    let unconstrained = chol.solve(&instance.b);

    if start_set.is_empty() && (n == 0 || (&instance.q * &unconstrained).min() >= -tol) {
        return Ok(finish(instance, unconstrained, Vec::new(), DVector::zeros(0), 0));
    }

    // Primal active set from the origin. The first step heads straight for
    // the unconstrained minimizer and stops at the first cone face it meets.
    let mut v = DVector::zeros(m);
    let mut working: Vec<usize> = Vec::new();
    for &i in start_set {
        if i < n && !working.contains(&i) {
            working.push(i);
        }
    }
    let max_iter = 50 * (m + n) + 50;
    for iter in 0..max_iter {
        let g = &instance.sigma * &v - &instance.b;
        let (p, mu) = match solve_equality_qp(&instance.sigma, &g, &instance.q, &working) {
            Some(sol) => sol,
            None => {
                // dependent rows in the working set: drop the newest
                working.pop();
                continue;
            }
        };
        if p.norm() <= 1e-13 * (1.0 + v.norm()) {
            // most negative multiplier; ties broken by lowest row index
            let drop = working
                .iter()
                .enumerate()
                .filter(|&(k, _)| mu[k] < -tol)
                .min_by(|&(ka, ra), &(kb, rb)| {
                    mu[ka].partial_cmp(&mu[kb]).unwrap().then(ra.cmp(rb))
                })
                .map(|(k, _)| (k, mu[k]));
            match drop {
                None => return Ok(finish(instance, v, working, mu, iter + 1)),
                Some((k, _)) => {
                    working.remove(k);
                }
            }
        } else {
            let qv = &instance.q * &v;
            let qp = &instance.q * &p;
            let mut step = 1.0;
            let mut blocking: Option<usize> = None;
            for i in 0..n {
                if working.contains(&i) || qp[i] >= -1e-15 * p.norm() {
                    continue;
                }
                let alpha = (-qv[i] / qp[i]).max(0.0);
                if alpha < step {
                    step = alpha;
                    blocking = Some(i);
                }
            }
            v += &p * step;
            if let Some(i) = blocking {
                working.push(i);
            }
        }
    }
    Err(KellyError::MaxIterationsExceeded(max_iter))
}

/// Solve `min ½pᵀΣp + gᵀp  s.t.  q_iᵀp = 0 (i ∈ W)` through its KKT
/// system. Returns the step and the working-set multipliers `μ` with
/// `Σ(v+p) − b = Q_Wᵀμ`.
fn solve_equality_qp(
    sigma: &DMatrix<f64>,
    g: &DVector<f64>,
    q: &DMatrix<f64>,
    working: &[usize],
) -> Option<(DVector<f64>, DVector<f64>)> {
    let m = sigma.nrows();
    let w = working.len();
    let mut kkt = DMatrix::zeros(m + w, m + w);
    kkt.view_mut((0, 0), (m, m)).copy_from(sigma);
    for (k, &row) in working.iter().enumerate() {
        for j in 0..m {
            kkt[(m + k, j)] = q[(row, j)];
            kkt[(j, m + k)] = -q[(row, j)];
        }
    }
    let mut rhs = DVector::zeros(m + w);
    rhs.rows_mut(0, m).copy_from(&(-g));
    let sol = kkt.clone().lu().solve(&rhs)?;
    if sol.iter().any(|x| !x.is_finite()) {
        return None;
    }
    // reject near-singular systems from linearly dependent working rows
    let check = (&kkt * &sol - &rhs).norm();
    if check > 1e-8 * (1.0 + rhs.norm()) {
        return None;
    }
    Some((sol.rows(0, m).into_owned(), sol.rows(m, w).into_owned()))
}

fn finish(
    instance: &QpInstance,
    v: DVector<f64>,
    working: Vec<usize>,
    mu: DVector<f64>,
    iterations: usize,
) -> QpSolution {
    let n = instance.q.nrows();
    let mut multipliers = DVector::zeros(n);
    for (k, &row) in working.iter().enumerate() {
        multipliers[row] = mu[k];
    }
    let mut active_set = working;
    active_set.sort_unstable();
    let residuals = kkt_residuals(instance, &v, &multipliers);
    QpSolution {
        objective: instance.objective(&v),
        v_star: v,
        active_set,
        multipliers,
        iterations,
        residuals,
    }
}

pub fn kkt_residuals(instance: &QpInstance, v: &DVector<f64>, lambda: &DVector<f64>) -> KktResiduals {
    let grad = &instance.sigma * v - &instance.b - instance.q.transpose() * lambda;
    let qv = &instance.q * v;
    let (primal, complementarity) = if instance.q.nrows() == 0 {
        (0.0, 0.0)
    } else {
        ((-qv.min()).max(0.0), lambda.dot(&qv).abs())
    };
    let dual = if lambda.is_empty() {
        0.0
    } else {
        (-lambda.min()).max(0.0)
    };
    KktResiduals {
        stationarity: grad.norm(),
        complementarity,
        primal,
        dual,
    }
}

#[derive(Debug, Clone)]
struct SegmentKelly {
    v_star: DVector<f64>,
    loading: DVector<f64>,
    squared_vol: f64,
}

/// Kelly fractions along `[0, T)`.
///
/// Solutions are stored on the construction grid. Where `b` and `σ` are
/// constant on a coefficient segment the segment's solution is reused for
/// every `t` in it; elsewhere `v*(t)` is re-solved at the requested time.
#[derive(Debug, Clone)]
pub struct KellyCurve {
    market: MarketModel,
    grid: Vec<f64>,
    solutions: Vec<QpSolution>,
    segment_bounds: Vec<f64>,
    segment_cache: Vec<Option<SegmentKelly>>,
    tol: f64,
}

/// Evenly spaced grid on `[0, T)` merged with the coefficient breakpoints.
pub fn default_grid(model: &MarketModel, step: f64) -> Vec<f64> {
    let horizon = model.horizon();
    let n = (horizon / step).ceil() as usize;
    let mut grid: Vec<f64> = (0..n).map(|k| k as f64 * step).filter(|t| *t < horizon).collect();
    grid.extend(model.coefficient_breakpoints().into_iter().filter(|t| *t < horizon));
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);
    grid
}

pub fn kelly_curve(model: &MarketModel, grid: &[f64]) -> Result<KellyCurve, KellyError> {
    kelly_curve_with_tol(model, grid, DEFAULT_TOL)
}

pub fn kelly_curve_with_tol(
    model: &MarketModel,
    grid: &[f64],
    tol: f64,
) -> Result<KellyCurve, KellyError> {
    let horizon = model.horizon();
    let bounds = model.coefficient_breakpoints();
    let mut points: Vec<f64> = grid
        .iter()
        .copied()
        .filter(|t| (0.0..horizon).contains(t))
        .chain(bounds.iter().copied().filter(|t| *t < horizon))
        .collect();
    points.sort_by(|a, b| a.partial_cmp(b).unwrap());
    points.dedup_by(|a, b| (*a - *b).abs() <= 1e-12);

    let solutions = points
        .par_iter()
        .map(|&t| solve_qp(&model.qp_at(t, false), tol))
        .collect::<Result<Vec<_>, _>>()?;
    for (t, s) in points.iter().zip(&solutions) {
        let sigma = model.sigma_at(*t);
        if (sigma.transpose() * &s.v_star).norm() <= 0.0 {
            return Err(KellyError::DegenerateKelly(*t));
        }
    }

    let segment_cache = bounds
        .windows(2)
        .map(|w| {
            let mid = 0.5 * (w[0] + w[1]);
            if !model.is_constant_near(mid) {
                return Ok(None);
            }
            let sol = solve_qp(&model.qp_at(w[0], false), tol)?;
            let loading = model.sigma_at(w[0]).transpose() * &sol.v_star;
            Ok(Some(SegmentKelly {
                squared_vol: loading.norm_squared(),
                v_star: sol.v_star,
                loading,
            }))
        })
        .collect::<Result<Vec<_>, KellyError>>()?;

    Ok(KellyCurve {
        market: model.clone(),
        grid: points,
        solutions,
        segment_bounds: bounds,
        segment_cache,
        tol,
    })
}

impl KellyCurve {
    pub fn market(&self) -> &MarketModel {
        &self.market
    }

    pub fn horizon(&self) -> f64 {
        self.market.horizon()
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn solutions(&self) -> &[QpSolution] {
        &self.solutions
    }

    /// Breakpoints of the coefficient segments, `0 = t₀ < … < T`.
    pub fn segment_bounds(&self) -> &[f64] {
        &self.segment_bounds
    }

    fn segment_of(&self, t: f64) -> usize {
        let n = self.segment_bounds.len() - 1;
        self.segment_bounds
            .partition_point(|&b| b <= t)
            .saturating_sub(1)
            .min(n - 1)
    }

    fn solve_at(&self, t: f64) -> SegmentKelly {
        let sol = solve_qp(&self.market.qp_at(t, false), self.tol)
            .expect("coefficients validated when the curve was built");
        let loading = self.market.sigma_at(t).transpose() * &sol.v_star;
        SegmentKelly {
            squared_vol: loading.norm_squared(),
            v_star: sol.v_star,
            loading,
        }
    }

    fn at(&self, t: f64) -> std::borrow::Cow<'_, SegmentKelly> {
        match &self.segment_cache[self.segment_of(t)] {
            Some(seg) => std::borrow::Cow::Borrowed(seg),
            None => std::borrow::Cow::Owned(self.solve_at(t)),
        }
    }

    /// `v*(t)`, right-continuous at breakpoints.
    pub fn v_star(&self, t: f64) -> DVector<f64> {
        self.at(t).v_star.clone()
    }

    /// `σ(t)ᵀv*(t)`.
    pub fn loading(&self, t: f64) -> DVector<f64> {
        self.at(t).loading.clone()
    }

    /// `‖σ(t)ᵀv*(t)‖²`.
    pub fn squared_vol(&self, t: f64) -> f64 {
        self.at(t).squared_vol
    }

    /// `∫ₜˢ ‖σᵀv*‖²`, exact on constant segments and composite Simpson
    /// (refined to 1e-10 relative) elsewhere.
    pub fn integrated_variance(&self, t: f64, s: f64) -> f64 {
        if s <= t {
            return 0.0;
        }
        let mut total = 0.0;
        for (i, w) in self.segment_bounds.windows(2).enumerate() {
            let (a, b) = (t.max(w[0]), s.min(w[1]));
            if b <= a {
                continue;
            }
            total += match &self.segment_cache[i] {
                Some(seg) => seg.squared_vol * (b - a),
                None => simpson_refined(|u| self.solve_at(u.min(w[1])).squared_vol, a, b, 1e-10),
            };
        }
        total
    }

    /// `V(t) = ∫ₜᵀ ‖σᵀv*‖²`.
    pub fn remaining_variance(&self, t: f64) -> f64 {
        self.integrated_variance(t, self.horizon())
    }

    pub fn is_piecewise_constant(&self) -> bool {
        self.segment_cache.iter().all(Option::is_some)
    }

    pub fn min_v_norm(&self) -> f64 {
        self.solutions
            .iter()
            .map(|s| s.v_star.norm())
            .fold(f64::INFINITY, f64::min)
    }

    pub fn min_loading_norm(&self) -> f64 {
        self.grid
            .iter()
            .zip(&self.solutions)
            .map(|(t, s)| (self.market.sigma_at(*t).transpose() * &s.v_star).norm())
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityReport {
    pub worst_residual: f64,
    pub worst_t: f64,
    pub points: usize,
}

/// Check `bᵀv* = ‖σᵀv*‖² > 0` at every grid point, with tolerance
/// `1e-9 · max(1, ‖b‖‖v*‖)`.
pub fn fitness_identity_check(curve: &KellyCurve) -> Result<IdentityReport, KellyError> {
    let mut report = IdentityReport {
        worst_residual: 0.0,
        worst_t: 0.0,
        points: curve.grid.len(),
    };
    for (&t, sol) in curve.grid.iter().zip(&curve.solutions) {
        let b = curve.market.b_at(t);
        let sigma = curve.market.sigma_at(t);
        let growth = b.dot(&sol.v_star);
        let vol = (sigma.transpose() * &sol.v_star).norm_squared();
        let residual = (growth - vol).abs();
        let bound = 1e-9 * (b.norm() * sol.v_star.norm()).max(1.0);
        if residual > bound || !(growth > 0.0) || !(vol > 0.0) {
            return Err(KellyError::IdentityViolation { t, residual });
        }
        if residual > report.worst_residual {
            report.worst_residual = residual;
            report.worst_t = t;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curve::PiecewiseCurve;
    use crate::market::ConeConstraint;
    use approx::assert_relative_eq;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    #[test]
    fn unconstrained_single_asset() {
        let inst = QpInstance::new(diag(&[0.04]), DVector::from_vec(vec![0.08]), DMatrix::zeros(0, 1));
        let s = solve_qp(&inst, DEFAULT_TOL).unwrap();
        assert_relative_eq!(s.v_star[0], 2.0, epsilon = 1e-14);
        assert!(s.active_set.is_empty());
    }

    #[test]
    fn binding_second_coordinate() {
        let inst = QpInstance::new(
            diag(&[0.04, 0.09]),
            DVector::from_vec(vec![0.08, -0.045]),
            DMatrix::identity(2, 2),
        );
        let s = solve_qp(&inst, DEFAULT_TOL).unwrap();
        assert_relative_eq!(s.v_star[0], 2.0, epsilon = 1e-13);
        assert!(s.v_star[1].abs() < 1e-13);
        assert_eq!(s.active_set, vec![1]);
        assert_relative_eq!(s.multipliers[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(s.multipliers[1], 0.045, epsilon = 1e-13);
        assert_relative_eq!(inst.b.dot(&s.v_star), 0.16, epsilon = 1e-13);
        assert!(s.residuals.max() < 1e-12);
    }

    #[test]
    fn redundant_rows_are_tolerated() {
        // the same face listed twice, plus a scaled copy
        let q = DMatrix::from_row_slice(3, 2, &[0.0, 1.0, 0.0, 1.0, 0.0, 2.0]);
        let inst = QpInstance::new(diag(&[0.04, 0.09]), DVector::from_vec(vec![0.08, -0.045]), q);
        let s = solve_qp(&inst, DEFAULT_TOL).unwrap();
        assert_relative_eq!(s.v_star[0], 2.0, epsilon = 1e-12);
        assert!(s.v_star[1].abs() < 1e-12);
        assert!(s.residuals.max() < 1e-10);
    }

    #[test]
    fn singular_sigma_is_rejected() {
        let inst = QpInstance::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
            DVector::from_vec(vec![0.1, 0.1]),
            DMatrix::zeros(0, 2),
        );
        assert_eq!(solve_qp(&inst, DEFAULT_TOL), Err(KellyError::SingularSigma));
    }

    #[test]
    fn correlated_pair_matches_direct_solve() {
        let sigma = DMatrix::from_row_slice(2, 2, &[0.04, 0.012, 0.012, 0.09]);
        let b = DVector::from_vec(vec![0.08, 0.03]);
        // Cramer's rule
        let det = 0.04 * 0.09 - 0.012 * 0.012;
        let want = [(0.09 * 0.08 - 0.012 * 0.03) / det, (0.04 * 0.03 - 0.012 * 0.08) / det];
        let s = solve_qp(&QpInstance::new(sigma, b, DMatrix::zeros(0, 2)), DEFAULT_TOL).unwrap();
        assert_relative_eq!(s.v_star[0], want[0], max_relative = 1e-13);
        assert_relative_eq!(s.v_star[1], want[1], max_relative = 1e-13);
    }

    #[test]
    fn piecewise_drift_gives_piecewise_curve() {
        let b = PiecewiseCurve::piecewise_constant(
            vec![0.0, 0.5, 1.0],
            vec![DMatrix::from_element(1, 1, 0.08), DMatrix::from_element(1, 1, 0.04)],
        )
        .unwrap();
        let model = MarketModel::new(
            1.0,
            PiecewiseCurve::scalar(0.0, 1.0).unwrap(),
            b,
            PiecewiseCurve::scalar(0.2, 1.0).unwrap(),
            ConeConstraint::unconstrained(1),
        )
        .unwrap();
        let curve = kelly_curve(&model, &default_grid(&model, 0.1)).unwrap();
        assert_relative_eq!(curve.v_star(0.3)[0], 2.0, epsilon = 1e-13);
        assert_relative_eq!(curve.v_star(0.5)[0], 1.0, epsilon = 1e-13);
        assert_relative_eq!(curve.integrated_variance(0.0, 1.0), 0.10, epsilon = 1e-14);
        assert_eq!(curve.integrated_variance(0.4, 0.4), 0.0);
        fitness_identity_check(&curve).unwrap();
    }

    #[test]
    fn linear_volatility_integrates_smoothly() {
        // σ(t) = 0.2 + 0.2t, b = 0.08: q(t) = b²/σ(t)²
        let sigma = PiecewiseCurve::piecewise_linear(
            vec![0.0, 1.0],
            vec![DMatrix::from_element(1, 1, 0.2), DMatrix::from_element(1, 1, 0.4)],
        )
        .unwrap();
        let model = MarketModel::new(
            1.0,
            PiecewiseCurve::scalar(0.0, 1.0).unwrap(),
            PiecewiseCurve::scalar(0.08, 1.0).unwrap(),
            sigma,
            ConeConstraint::unconstrained(1),
        )
        .unwrap();
        let curve = kelly_curve(&model, &default_grid(&model, 0.25)).unwrap();
        // ∫₀¹ 0.0064/(0.2+0.2t)² dt = 0.0064/0.2 · (1/0.2 − 1/0.4)
        let exact = 0.0064 / 0.2 * (1.0 / 0.2 - 1.0 / 0.4);
        assert_relative_eq!(curve.integrated_variance(0.0, 1.0), exact, max_relative = 1e-9);
        assert!(!curve.is_piecewise_constant());
    }
}
