//! Piecewise coefficient curves on `[0, T)`.
//!
//! Intervals are closed on the left and open on the right. Evaluating at a
//! breakpoint returns the value of the segment that starts there; the left
//! limit is available separately. Each segment extends continuously to its
//! right endpoint, so `eval(T)` is the left limit of the last segment.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const BREAKPOINT_TOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum CurveError {
    #[error("breakpoints must be strictly increasing from 0 to the horizon, got {0:?}")]
    BadBreakpoints(Vec<f64>),
    #[error("expected {expected} segment values, got {found}")]
    SegmentCount { expected: usize, found: usize },
    #[error("curve value has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("curve contains a non-finite value")]
    NonFinite,
    #[error("curve of shape {0:?} is not scalar")]
    NotScalar((usize, usize)),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Segment {
    Constant(DMatrix<f64>),
    /// Linear interpolation between the values at the two segment ends.
    Linear {
        start: DMatrix<f64>,
        end: DMatrix<f64>,
    },
}

impl Segment {
    fn eval(&self, frac: f64) -> DMatrix<f64> {
        match self {
            Segment::Constant(v) => v.clone(),
            Segment::Linear { start, end } => start + (end - start) * frac,
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            Segment::Constant(v) => v.shape(),
            Segment::Linear { start, .. } => start.shape(),
        }
    }

    fn is_finite(&self) -> bool {
        match self {
            Segment::Constant(v) => v.iter().all(|x| x.is_finite()),
            Segment::Linear { start, end } => start.iter().chain(end.iter()).all(|x| x.is_finite()),
        }
    }

    fn is_constant(&self) -> bool {
        match self {
            Segment::Constant(_) => true,
            Segment::Linear { start, end } => start == end,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseCurve {
    breakpoints: Vec<f64>,
    segments: Vec<Segment>,
    shape: (usize, usize),
}

impl PiecewiseCurve {
    pub fn new(breakpoints: Vec<f64>, segments: Vec<Segment>) -> Result<Self, CurveError> {
        let ok = breakpoints.len() >= 2
            && breakpoints[0] == 0.0
            && breakpoints.windows(2).all(|w| w[1] > w[0])
            && breakpoints.iter().all(|t| t.is_finite());
        if !ok {
            return Err(CurveError::BadBreakpoints(breakpoints));
        }
        if segments.len() != breakpoints.len() - 1 {
            return Err(CurveError::SegmentCount {
                expected: breakpoints.len() - 1,
                found: segments.len(),
            });
        }
        let shape = segments[0].shape();
        for seg in &segments {
            if seg.shape() != shape {
                return Err(CurveError::ShapeMismatch {
                    expected: shape,
                    found: seg.shape(),
                });
            }
            if let Segment::Linear { start, end } = seg {
                if start.shape() != end.shape() {
                    return Err(CurveError::ShapeMismatch {
                        expected: start.shape(),
                        found: end.shape(),
                    });
                }
            }
            if !seg.is_finite() {
                return Err(CurveError::NonFinite);
            }
        }
        Ok(Self {
            breakpoints,
            segments,
            shape,
        })
    }

    pub fn constant(value: DMatrix<f64>, horizon: f64) -> Result<Self, CurveError> {
        Self::new(vec![0.0, horizon], vec![Segment::Constant(value)])
    }

    pub fn scalar(value: f64, horizon: f64) -> Result<Self, CurveError> {
        Self::constant(DMatrix::from_element(1, 1, value), horizon)
    }

    pub fn vector(values: &[f64], horizon: f64) -> Result<Self, CurveError> {
        Self::constant(DMatrix::from_column_slice(values.len(), 1, values), horizon)
    }

    /// One value per segment.
    pub fn piecewise_constant(
        breakpoints: Vec<f64>,
        values: Vec<DMatrix<f64>>,
    ) -> Result<Self, CurveError> {
        Self::new(breakpoints, values.into_iter().map(Segment::Constant).collect())
    }

    /// Continuous piecewise-linear curve through one value per breakpoint.
    pub fn piecewise_linear(
        breakpoints: Vec<f64>,
        knots: Vec<DMatrix<f64>>,
    ) -> Result<Self, CurveError> {
        if knots.len() != breakpoints.len() {
            return Err(CurveError::SegmentCount {
                expected: breakpoints.len(),
                found: knots.len(),
            });
        }
        let segments = knots
            .windows(2)
            .map(|w| Segment::Linear {
                start: w[0].clone(),
                end: w[1].clone(),
            })
            .collect();
        Self::new(breakpoints, segments)
    }

    pub fn horizon(&self) -> f64 {
        *self.breakpoints.last().unwrap()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    /// Index of the segment `[t_i, t_{i+1})` containing `t`; times at or past
    /// the horizon map to the last segment.
    pub fn segment_index(&self, t: f64) -> usize {
        let n = self.segments.len();
        let idx = self.breakpoints.partition_point(|&b| b <= t);
        idx.saturating_sub(1).min(n - 1)
    }

    fn eval_in(&self, i: usize, t: f64) -> DMatrix<f64> {
        let (a, b) = (self.breakpoints[i], self.breakpoints[i + 1]);
        let frac = ((t - a) / (b - a)).clamp(0.0, 1.0);
        self.segments[i].eval(frac)
    }

    pub fn eval(&self, t: f64) -> DMatrix<f64> {
        self.eval_in(self.segment_index(t), t)
    }

    /// Limit from the left at `t`. At `t = 0` this is the value at 0.
    pub fn left_limit(&self, t: f64) -> DMatrix<f64> {
        if t <= 0.0 {
            return self.eval(0.0);
        }
        let idx = self.breakpoints.partition_point(|&b| b < t);
        let i = idx.saturating_sub(1).min(self.segments.len() - 1);
        self.eval_in(i, t)
    }

    pub fn scalar_at(&self, t: f64) -> f64 {
        self.eval(t)[(0, 0)]
    }

    pub fn is_constant_segment(&self, i: usize) -> bool {
        self.segments[i].is_constant()
    }

    pub fn is_piecewise_constant(&self) -> bool {
        self.segments.iter().all(Segment::is_constant)
    }

    pub fn is_identically_zero(&self) -> bool {
        self.segments.iter().all(|s| match s {
            Segment::Constant(v) => v.iter().all(|x| *x == 0.0),
            Segment::Linear { start, end } => start.iter().chain(end.iter()).all(|x| *x == 0.0),
        })
    }

    /// Exact `∫_a^b` of a scalar curve (segments are constant or linear).
    pub fn integrate_scalar(&self, a: f64, b: f64) -> Result<f64, CurveError> {
        if self.shape != (1, 1) {
            return Err(CurveError::NotScalar(self.shape));
        }
        if b <= a {
            return Ok(0.0);
        }
        let mut total = 0.0;
        for i in 0..self.segments.len() {
            let (lo, hi) = (self.breakpoints[i], self.breakpoints[i + 1]);
            let (s, e) = (a.max(lo), b.min(hi));
            if e <= s {
                continue;
            }
            let mid = 0.5 * (s + e);
            total += self.eval_in(i, mid)[(0, 0)] * (e - s);
        }
        Ok(total)
    }
}

/// Sorted union of several breakpoint lists, merging points closer than
/// `1e-12`.
pub fn merge_breakpoints<'a, I>(lists: I) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut all: Vec<f64> = lists.into_iter().flatten().copied().collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.dedup_by(|a, b| (*a - *b).abs() <= BREAKPOINT_TOL);
    all
}

/// A single curve value in JSON: a number, a vector, or a row-major matrix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum CurveValue {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
}

impl CurveValue {
    /// Convert to a matrix of the requested shape. Vectors are read as
    /// columns; a scalar also fills any `1×1` shape.
    pub fn to_matrix(&self, shape: (usize, usize)) -> Result<DMatrix<f64>, CurveError> {
        let (rows, cols) = shape;
        let m = match self {
            CurveValue::Scalar(x) => DMatrix::from_element(1, 1, *x),
            CurveValue::Vector(v) if cols == 1 => DMatrix::from_column_slice(v.len(), 1, v),
            CurveValue::Vector(v) if rows == 1 => DMatrix::from_row_slice(1, v.len(), v),
            CurveValue::Vector(v) => {
                // flat row-major matrix
                if v.len() != rows * cols {
                    return Err(CurveError::ShapeMismatch {
                        expected: shape,
                        found: (v.len(), 1),
                    });
                }
                DMatrix::from_row_slice(rows, cols, v)
            }
            CurveValue::Matrix(rows_v) => {
                let r = rows_v.len();
                let c = rows_v.first().map_or(0, Vec::len);
                if rows_v.iter().any(|row| row.len() != c) {
                    return Err(CurveError::ShapeMismatch {
                        expected: shape,
                        found: (r, 0),
                    });
                }
                DMatrix::from_row_iterator(r, c, rows_v.iter().flatten().copied())
            }
        };
        if m.shape() != shape {
            return Err(CurveError::ShapeMismatch {
                expected: shape,
                found: m.shape(),
            });
        }
        Ok(m)
    }

    fn from_matrix(m: &DMatrix<f64>) -> Self {
        match m.shape() {
            (1, 1) => CurveValue::Scalar(m[(0, 0)]),
            (_, 1) => CurveValue::Vector(m.iter().copied().collect()),
            _ => CurveValue::Matrix(m.row_iter().map(|r| r.iter().copied().collect()).collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum CurveKind {
    #[default]
    Constant,
    Linear,
}

/// JSON form of a curve: either a bare value (constant on `[0, T]`) or
/// `{breakpoints, kind, values}`.
///
/// For `kind = "constant"` there is one value per segment. For
/// `kind = "linear"` there is one value per breakpoint (continuous curve) or
/// two per segment (start and end, allowing jumps).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum CurveSpec {
    Piecewise {
        breakpoints: Vec<f64>,
        #[serde(default)]
        kind: CurveKind,
        values: Vec<CurveValue>,
    },
    Constant(CurveValue),
}

impl CurveSpec {
    pub fn build(&self, shape: (usize, usize), horizon: f64) -> Result<PiecewiseCurve, CurveError> {
        match self {
            CurveSpec::Constant(v) => PiecewiseCurve::constant(v.to_matrix(shape)?, horizon),
            CurveSpec::Piecewise {
                breakpoints,
                kind,
                values,
            } => {
                if breakpoints.last().map_or(true, |t| (t - horizon).abs() > BREAKPOINT_TOL) {
                    return Err(CurveError::BadBreakpoints(breakpoints.clone()));
                }
                let mut bps = breakpoints.clone();
                *bps.last_mut().unwrap() = horizon;
                let mats = values
                    .iter()
                    .map(|v| v.to_matrix(shape))
                    .collect::<Result<Vec<_>, _>>()?;
                let segs = bps.len().saturating_sub(1);
                match kind {
                    CurveKind::Constant => PiecewiseCurve::piecewise_constant(bps, mats),
                    CurveKind::Linear if mats.len() == 2 * segs => {
                        let segments = mats
                            .chunks(2)
                            .map(|c| Segment::Linear {
                                start: c[0].clone(),
                                end: c[1].clone(),
                            })
                            .collect();
                        PiecewiseCurve::new(bps, segments)
                    }
                    CurveKind::Linear => PiecewiseCurve::piecewise_linear(bps, mats),
                }
            }
        }
    }

    pub fn from_curve(curve: &PiecewiseCurve) -> Self {
        if curve.is_piecewise_constant() {
            let values = curve
                .segments
                .iter()
                .map(|s| match s {
                    Segment::Constant(v) | Segment::Linear { start: v, .. } => {
                        CurveValue::from_matrix(v)
                    }
                })
                .collect();
            CurveSpec::Piecewise {
                breakpoints: curve.breakpoints.clone(),
                kind: CurveKind::Constant,
                values,
            }
        } else {
            let values = curve
                .segments
                .iter()
                .flat_map(|s| match s {
                    Segment::Constant(v) => [CurveValue::from_matrix(v), CurveValue::from_matrix(v)],
                    Segment::Linear { start, end } => {
                        [CurveValue::from_matrix(start), CurveValue::from_matrix(end)]
                    }
                })
                .collect();
            CurveSpec::Piecewise {
                breakpoints: curve.breakpoints.clone(),
                kind: CurveKind::Linear,
                values,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_curve() -> PiecewiseCurve {
        PiecewiseCurve::piecewise_constant(
            vec![0.0, 0.5, 1.0],
            vec![DMatrix::from_element(1, 1, 0.02), DMatrix::from_element(1, 1, 0.04)],
        )
        .unwrap()
    }

    #[test]
    fn breakpoint_evaluates_to_right_segment() {
        let c = step_curve();
        assert_eq!(c.scalar_at(0.5), 0.04);
        assert_eq!(c.left_limit(0.5)[(0, 0)], 0.02);
        assert_eq!(c.scalar_at(0.4999), 0.02);
        assert_eq!(c.scalar_at(1.0), 0.04);
    }

    #[test]
    fn integral_of_step_curve_is_exact() {
        let c = step_curve();
        assert!((c.integrate_scalar(0.0, 1.0).unwrap() - 0.03).abs() < 1e-15);
        assert!((c.integrate_scalar(0.25, 0.75).unwrap() - 0.015).abs() < 1e-15);
        assert_eq!(c.integrate_scalar(0.3, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn linear_curve_interpolates_and_integrates() {
        let c = PiecewiseCurve::piecewise_linear(
            vec![0.0, 1.0, 2.0],
            vec![
                DMatrix::from_element(1, 1, 0.0),
                DMatrix::from_element(1, 1, 1.0),
                DMatrix::from_element(1, 1, 1.0),
            ],
        )
        .unwrap();
        assert!((c.scalar_at(0.25) - 0.25).abs() < 1e-15);
        assert!((c.integrate_scalar(0.0, 2.0).unwrap() - 1.5).abs() < 1e-15);
        assert!(!c.is_constant_segment(0));
        assert!(c.is_constant_segment(1));
    }

    #[test]
    fn rejects_bad_breakpoints() {
        let err = PiecewiseCurve::piecewise_constant(
            vec![0.0, 0.5, 0.5],
            vec![DMatrix::zeros(1, 1), DMatrix::zeros(1, 1)],
        );
        assert!(matches!(err, Err(CurveError::BadBreakpoints(_))));
        assert!(PiecewiseCurve::scalar(1.0, -1.0).is_err());
    }

    #[test]
    fn json_forms() {
        let spec: CurveSpec =
            serde_json::from_str(r#"{"breakpoints":[0,0.5,1],"values":[[0.08,0.01],[0.04,0.02]]}"#)
                .unwrap();
        let c = spec.build((2, 1), 1.0).unwrap();
        assert_eq!(c.eval(0.7)[(1, 0)], 0.02);

        let spec: CurveSpec = serde_json::from_str("[[0.2, 0.0],[0.05, 0.3]]").unwrap();
        let c = spec.build((2, 2), 1.0).unwrap();
        assert_eq!(c.eval(0.3)[(1, 0)], 0.05);

        let spec: CurveSpec =
            serde_json::from_str(r#"{"breakpoints":[0,1],"kind":"linear","values":[0.1,0.3]}"#)
                .unwrap();
        let c = spec.build((1, 1), 1.0).unwrap();
        assert!((c.scalar_at(0.5) - 0.2).abs() < 1e-15);

        let back = CurveSpec::from_curve(&c);
        assert_eq!(back.build((1, 1), 1.0).unwrap(), c);
    }

    #[test]
    fn merge_dedups() {
        let a = [0.0, 0.5, 1.0];
        let b = [0.0, 0.25, 0.5 + 1e-14, 1.0];
        assert_eq!(merge_breakpoints([&a[..], &b[..]]), vec![0.0, 0.25, 0.5, 1.0]);
    }
}
