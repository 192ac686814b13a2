use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use quantfolio::kelly::{kelly_curve, solve_qp, QpInstance};
use quantfolio::market::{ConeConstraint, MarketModel};
use quantfolio::PiecewiseCurve;

fn instance() -> impl Strategy<Value = (usize, Vec<f64>, Vec<f64>, Vec<f64>, usize)> {
    (1usize..=5).prop_flat_map(|m| {
        (
            Just(m),
            prop::collection::vec(-0.3f64..0.3, m * m),
            prop::collection::vec(-0.1f64..0.1, m),
            prop::collection::vec(-1.0f64..1.0, (m + 2) * m),
            0..=m + 2,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn solution_is_feasible_optimal_and_satisfies_kkt((m, s, b, q, rows) in instance()) {
        let sigma_root = DMatrix::from_row_slice(m, m, &s) + DMatrix::identity(m, m) * 0.2;
        let sigma = &sigma_root * sigma_root.transpose();
        let b = DVector::from_vec(b);
        let q = DMatrix::from_row_slice(rows, m, &q[..rows * m]);
        let inst = QpInstance::new(sigma.clone(), b.clone(), q.clone());
        let sol = solve_qp(&inst, 1e-12).unwrap();
        prop_assert!(sol.residuals.max() < 1e-9, "{:?}", sol.residuals);
        let v = &sol.v_star;
        if rows > 0 {
            prop_assert!((&q * v).min() > -1e-10);
        }
        // bᵀv* = v*ᵀΣv* holds for any cone
        let growth = b.dot(v);
        let var = v.dot(&(&sigma * v));
        prop_assert!((growth - var).abs() <= 1e-9 * var.max(1e-12));
        // no admissible ray from v* improves the objective
        let f = inst.objective(v);
        for scale in [0.0, 0.5, 0.9, 1.1, 2.0] {
            prop_assert!(inst.objective(&(v * scale)) >= f - 1e-14);
        }
    }
}

#[test]
fn long_only_constraint_binds_on_the_losing_asset() {
    let sigma = DMatrix::from_row_slice(2, 2, &[0.04, 0.0, 0.0, 0.09]);
    let inst = QpInstance::new(sigma, DVector::from_vec(vec![0.08, -0.02]), DMatrix::identity(2, 2));
    let sol = solve_qp(&inst, 1e-12).unwrap();
    assert_eq!(sol.active_set, vec![1]);
    assert!((sol.v_star[0] - 2.0).abs() < 1e-14);
    assert_eq!(sol.v_star[1], 0.0);
    assert!(sol.multipliers[1] > 0.0);
}

#[test]
fn kelly_exposure_integrates_across_coefficient_breakpoints() {
    // b jumps from 0.08 to 0.04 at t = 0.5: ‖σᵀv*‖² = (b/σ)² per segment
    let b = PiecewiseCurve::piecewise_constant(
        vec![0.0, 0.5, 1.0],
        vec![DMatrix::from_element(1, 1, 0.08), DMatrix::from_element(1, 1, 0.04)],
    )
    .unwrap();
    let sigma = PiecewiseCurve::constant(DMatrix::from_element(1, 1, 0.2), 1.0).unwrap();
    let m = MarketModel::new(
        1.0,
        PiecewiseCurve::scalar(0.0, 1.0).unwrap(),
        b,
        sigma,
        ConeConstraint::unconstrained(1),
    )
    .unwrap();
    let k = kelly_curve(&m, &[0.0, 0.25, 0.5, 0.75]).unwrap();
    assert!((k.remaining_variance(0.0) - (0.5 * 0.16 + 0.5 * 0.04)).abs() < 1e-12);
    assert!((k.integrated_variance(0.25, 0.75) - (0.25 * 0.16 + 0.25 * 0.04)).abs() < 1e-12);
    assert!((k.v_star(0.5)[0] - 1.0).abs() < 1e-14);
    assert!((k.v_star(0.4999)[0] - 2.0).abs() < 1e-14);
}
