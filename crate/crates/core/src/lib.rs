//! Portfolio selection by quantile maximization in a market with
//! deterministic coefficients.
//!
//! The crate covers the cone-constrained Kelly portfolio, the strategy
//! families compared under median maximization (equilibrium portfolio
//! insurance, fractional Kelly, pre-committed, naive, zero investment and
//! general affine rules), closed-form terminal-wealth quantiles and their
//! deviation rates, Monte Carlo verification, and a synthetic household
//! portfolio-share study.

pub mod curve;
pub mod household;
pub mod kelly;
pub mod market;
pub mod normal;
pub mod quadrature;
pub mod quantile;
pub mod sim;
pub mod strategy;

pub use curve::{CurveSpec, PiecewiseCurve};
pub use kelly::{kelly_curve, KellyCurve, QpInstance, QpSolution};
pub use market::{ConeConstraint, MarketModel};
pub use strategy::{AffineStrategy, Strategy};
