//! Standard normal density, distribution and quantile functions.
//!
//! Every closed form in this crate runs through `Φ`, `Φ'` and `Φ⁻¹`, so the
//! tails matter: `cdf` is computed from the complementary error function,
//! which keeps full relative accuracy for `Φ(-z)` at large `z`, and
//! `inv_cdf` polishes a rational starting value with a Halley step.

use libm::erfc;
use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// `1/sqrt(2π)`, the density at zero.
pub const PDF_AT_ZERO: f64 = 0.398_942_280_401_432_7;

/// Standard normal density `φ(x)`.
pub fn pdf(x: f64) -> f64 {
    PDF_AT_ZERO * (-0.5 * x * x).exp()
}

/// Standard normal distribution function `Φ(x)`.
pub fn cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(x) = Φ(-x)`, accurate for large positive `x`.
pub fn sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Inverse Mills ratio `φ(x) / Φ(x)`.
///
/// For very negative `x` both factors underflow, so the asymptotic series
/// `-x - 1/x + 2/x³` is used once `Φ(x)` drops below the smallest normal.
pub fn inverse_mills(x: f64) -> f64 {
    let tail = cdf(x);
    if tail > f64::MIN_POSITIVE {
        pdf(x) / tail
    } else {
        let inv = 1.0 / x;
        -x - inv + 2.0 * inv * inv * inv
    }
}

// Acklam's rational approximation, relative error ~1.15e-9 before refinement.
const A: [f64; 6] = [
    -3.969_683_028_665_376e1,
    2.209_460_984_245_205e2,
    -2.759_285_104_469_687e2,
    1.383_577_518_672_69e2,
    -3.066_479_806_614_716e1,
    2.506_628_277_459_239,
];
const B: [f64; 5] = [
    -5.447_609_879_822_406e1,
    1.615_858_368_580_409e2,
    -1.556_989_798_598_866e2,
    6.680_131_188_771_972e1,
    -1.328_068_155_288_572e1,
];
const C: [f64; 6] = [
    -7.784_894_002_430_293e-3,
    -3.223_964_580_411_365e-1,
    -2.400_758_277_161_838,
    -2.549_732_539_343_734,
    4.374_664_141_464_968,
    2.938_163_982_698_783,
];
const D: [f64; 4] = [
    7.784_695_709_041_462e-3,
    3.224_671_290_700_398e-1,
    2.445_134_137_142_996,
    3.754_408_661_907_416,
];
const P_LOW: f64 = 0.024_25;

fn acklam(p: f64) -> f64 {
    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    }
}

/// Standard normal quantile `Φ⁻¹(p)`.
///
/// Returns `-inf`/`+inf` at `p = 0`/`p = 1` and NaN outside `[0, 1]`.
pub fn inv_cdf(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let x = acklam(p);
    // One Halley step. The residual is taken on the smaller tail so that
    // p close to 1 does not lose digits to cancellation.
    let e = if x <= 0.0 { cdf(x) - p } else { (1.0 - p) - sf(x) };
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Reference values from mpmath at 30 digits.
    const CDF_TABLE: [(f64, f64); 7] = [
        (-0.4, 0.344_578_258_389_675_83),
        (-1.0, 0.158_655_253_931_457_05),
        (-5.0, 2.866_515_718_791_939e-7),
        (-10.0, 7.619_853_024_160_526e-24),
        (0.0, 0.5),
        (1.5, 0.933_192_798_731_141_9),
        (-30.0, 4.906_713_927_148_187e-198),
    ];

    #[test]
    fn cdf_matches_high_precision_table() {
        for (x, want) in CDF_TABLE {
            assert_relative_eq!(cdf(x), want, max_relative = 1e-14);
        }
    }

    #[test]
    fn pdf_values() {
        assert_relative_eq!(pdf(0.4), 0.368_270_140_303_323_1, max_relative = 1e-15);
        assert_relative_eq!(pdf(-1.0), 0.241_970_724_519_143_37, max_relative = 1e-15);
    }

    #[test]
    fn inverse_cdf_quartile_and_deciles() {
        assert_relative_eq!(inv_cdf(0.25), -0.674_489_750_196_081_7, max_relative = 1e-14);
        assert_relative_eq!(inv_cdf(0.4), -0.253_347_103_135_799_8, max_relative = 1e-13);
        assert_relative_eq!(inv_cdf(0.975), 1.959_963_984_540_054, max_relative = 1e-14);
        assert_eq!(inv_cdf(0.5), 0.0);
        assert_relative_eq!(inv_cdf(1e-20), -9.262_340_089_798_153, max_relative = 1e-13);
    }

    #[test]
    fn inverse_cdf_edges() {
        assert_eq!(inv_cdf(0.0), f64::NEG_INFINITY);
        assert_eq!(inv_cdf(1.0), f64::INFINITY);
        assert!(inv_cdf(1.5).is_nan());
    }

    #[test]
    fn inverse_mills_far_tail_is_continuous() {
        // φ(x)/Φ(x) ~ -x for x → -∞
        let near = inverse_mills(-37.0);
        assert_relative_eq!(near, 37.0 + 1.0 / 37.0, max_relative = 1e-5);
        let far = inverse_mills(-60.0);
        assert!(far > 60.0 && far < 60.02);
    }

    proptest::proptest! {
        #[test]
        fn inv_cdf_round_trips(p in 1e-12f64..(1.0 - 1e-12)) {
            let x = inv_cdf(p);
            let back = if x <= 0.0 { cdf(x) } else { 1.0 - sf(x) };
            proptest::prop_assert!(((back - p) / p.min(1.0 - p)).abs() < 1e-12);
        }
    }
}
