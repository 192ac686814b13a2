use nalgebra::{DMatrix, DVector};
use quantfolio::kelly::{default_grid, kelly_curve, KellyCurve};
use quantfolio::market::{ConeConstraint, MarketModel};
use quantfolio::sim::{perturbation_test, simulate, Scheme, SimConfig, SimError};
use quantfolio::strategy::Strategy;

fn benchmark() -> KellyCurve {
    let m = MarketModel::constant(
        1.0,
        &[0.08],
        DMatrix::from_element(1, 1, 0.2),
        ConeConstraint::unconstrained(1),
    )
    .unwrap();
    kelly_curve(&m, &default_grid(&m, 1.0 / 252.0)).unwrap()
}

fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn fractional_kelly_terminal_mean() {
    let k = benchmark();
    let s = Strategy::FractionalKelly { gamma: 0.5 };
    for scheme in [Scheme::Exact, Scheme::LogEuler { step: 1.0 / 252.0 }] {
        let batch = simulate(&s, &k, 0.0, 100.0, &SimConfig::new(200_000, 11).with_scheme(scheme)).unwrap();
        let (mean, se) = mean_and_stderr(&batch.terminal());
        // E X_T = x e^{γ bᵀv* T}
        let expected = 100.0 * (0.5f64 * 0.16).exp();
        assert!((mean - expected).abs() < 4.0 * se, "{scheme:?}: {mean} vs {expected} ± {se}");
    }
}

#[test]
fn equilibrium_rarely_breaches_under_euler_steps() {
    let k = benchmark();
    let s = Strategy::Equilibrium { xi: 60.0 };
    for scheme in [Scheme::LogEuler { step: 1.0 / 252.0 }, Scheme::Euler { step: 1.0 / 252.0 }] {
        let batch = simulate(&s, &k, 0.0, 100.0, &SimConfig::new(100_000, 12).with_scheme(scheme)).unwrap();
        assert!(batch.breach_fraction() < 1e-3, "{scheme:?}: {}", batch.breach_fraction());
        assert!(batch.terminal().iter().all(|x| *x > 60.0));
    }
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let k = benchmark();
    let s = Strategy::PreCommitted { xi: 60.0, anchor_t: 0.0, anchor_x: 100.0 };
    let cfg = SimConfig::new(5_000, 13).with_record_times(vec![0.5, 1.0]).with_antithetic(true);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulate(&s, &k, 0.0, 100.0, &cfg).unwrap())
    };
    let (a, b) = (run(1), run(4));
    for p in 0..5_000 {
        assert_eq!(a.path(p), b.path(p));
    }
}

#[test]
fn antithetic_pairs_mirror_each_other() {
    let k = benchmark();
    let s = Strategy::FractionalKelly { gamma: 1.0 };
    let cfg = SimConfig::new(4, 14).with_scheme(Scheme::Exact).with_antithetic(true);
    let batch = simulate(&s, &k, 0.0, 100.0, &cfg).unwrap();
    // log-growth has mean q/2 = 0.08 under full Kelly
    let lg = |p: usize| (batch.path(p)[0] / 100.0).ln();
    assert!((lg(0) + lg(1) - 0.16).abs() < 1e-12);
    assert!((lg(2) + lg(3) - 0.16).abs() < 1e-12);
}

#[test]
fn deviating_to_the_strategy_itself_changes_nothing() {
    let k = benchmark();
    let s = Strategy::Equilibrium { xi: 60.0 };
    let hat = s.allocation(&k, 0.2, 100.0).unwrap();
    let r = perturbation_test(&s, 0.5, 0.2, 100.0, &hat, &[0.05], &k, &SimConfig::new(10_000, 15)).unwrap()[0];
    assert_eq!(r.diff, 0.0);
    assert_eq!(r.stderr, 0.0);
}

#[test]
fn infeasible_deviation_is_rejected() {
    let m = MarketModel::constant(1.0, &[0.08], DMatrix::from_element(1, 1, 0.2), ConeConstraint::long_only(1)).unwrap();
    let k = kelly_curve(&m, &[0.0]).unwrap();
    let s = Strategy::Equilibrium { xi: 60.0 };
    let short = DVector::from_vec(vec![-10.0]);
    let err = perturbation_test(&s, 0.5, 0.0, 100.0, &short, &[0.05], &k, &SimConfig::new(100, 1)).unwrap_err();
    assert!(matches!(err, SimError::InfeasibleDeviation(_)));
}

#[test]
fn exact_scheme_is_unavailable_for_naive() {
    let k = benchmark();
    let err = simulate(&Strategy::Naive { xi: 60.0 }, &k, 0.0, 100.0, &SimConfig::new(10, 1)).unwrap_err();
    assert!(matches!(err, SimError::SchemeUnavailable { .. }));
}
