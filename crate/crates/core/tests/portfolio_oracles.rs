mod common;

use common::*;
use proptest::prelude::*;
use regime_core::portfolio::*;

fn feasible(w: &[f64]) -> bool {
    w.iter().all(|x| *x >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-8
}

fn scaled_cov(m: &RegimeMoments, c: f64) -> RegimeMoments {
    RegimeMoments::new(
        m.mean.clone(),
        m.covariance
            .iter()
            .map(|r| r.iter().map(|v| v * c).collect())
            .collect(),
    )
    .unwrap()
}

#[test]
fn max_return_beats_grid() {
    let mut r = rng(31);
    for _ in 0..20 {
        let m = random_moments(&mut r, 4);
        let w = max_return(&m, 0.8).unwrap().weights;
        assert!(w.iter().all(|x| *x <= 0.8 + 1e-15) && feasible(&w));
        let grid = grid_oracle(&m, Objective::MaxReturn { cap: 0.8 }, 0.05).unwrap();
        let ret: f64 = m.mean.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!(ret >= grid.value - 1e-9);
    }
}

#[test]
fn sharpe_matches_fine_grid() {
    let mut r = rng(32);
    let mut checked = 0;
    while checked < 10 {
        let m = random_moments(&mut r, 3);
        if m.mean.iter().all(|x| *x <= 0.0) {
            continue;
        }
        checked += 1;
        let w = max_sharpe(&m).unwrap().weights;
        assert!(feasible(&w));
        let grid = grid_oracle(&m, Objective::Sharpe, 0.01).unwrap();
        let s = sharpe_ratio(&m, &w);
        assert!(
            s >= grid.value - 1e-3 * grid.value.abs(),
            "{s} vs grid {}",
            grid.value
        );
    }
}

#[test]
fn sharpe_satisfies_first_order_conditions() {
    let mut r = rng(33);
    for _ in 0..20 {
        let m = random_moments(&mut r, 4);
        let out = max_sharpe(&m).unwrap();
        if out.min_variance_fallback {
            continue;
        }
        let w = out.weights;
        let h = 1e-7;
        let grad: Vec<f64> = (0..4)
            .map(|j| {
                let mut up = w.clone();
                up[j] += h;
                let mut dn = w.clone();
                dn[j] -= h;
                (sharpe_ratio(&m, &up) - sharpe_ratio(&m, &dn)) / (2.0 * h)
            })
            .collect();
        let step: Vec<f64> = w.iter().zip(&grad).map(|(a, g)| a + g).collect();
        let proj = project_simplex(&step);
        let res = proj
            .iter()
            .zip(&w)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(res < 1e-6, "projected gradient residual {res}");
    }
}

#[test]
fn max_diversification_matches_fine_grid() {
    let mut r = rng(34);
    for _ in 0..10 {
        let m = random_moments(&mut r, 3);
        let w = max_diversification(&m).unwrap().weights;
        let grid = grid_oracle(&m, Objective::MaxDiversification, 0.01).unwrap();
        assert!(diversification_ratio(&m, &w) >= grid.value * (1.0 - 1e-3));
    }
}

#[test]
fn min_variance_beats_grid_and_meets_kkt() {
    let mut r = rng(35);
    for _ in 0..5 {
        let m = random_moments(&mut r, 5);
        let w = min_variance(&m).unwrap().weights;
        let var = portfolio_variance(&m.covariance, &w);
        let grid = grid_oracle(&m, Objective::MinVariance, 0.02).unwrap();
        assert!(var <= grid.value + 1e-6);
        // KKT: (Vw)_j = w'Vw on the support, >= outside
        let rc: Vec<f64> = (0..5)
            .map(|j| m.covariance[j].iter().zip(&w).map(|(c, x)| c * x).sum())
            .collect();
        for j in 0..5 {
            let resid = (rc[j] - var) / var;
            if w[j] > 0.0 {
                assert!(resid.abs() <= 1e-8, "support residual {resid}");
            } else {
                assert!(resid >= -1e-8, "excluded asset residual {resid}");
            }
        }
    }
}

#[test]
fn risk_parity_equalises_contributions() {
    let mut r = rng(36);
    for _ in 0..20 {
        let m = random_moments(&mut r, 4);
        let w = risk_parity(&m).unwrap().weights;
        assert!(feasible(&w));
        let rc = risk_contributions(&m.covariance, &w);
        let total: f64 = rc.iter().sum();
        let spread = rc.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            - rc.iter().copied().fold(f64::INFINITY, f64::min);
        assert!(spread <= 1e-8 * total, "spread {spread} of {total}");
    }
}

#[test]
fn solver_never_loses_to_coarse_grid() {
    let mut r = rng(37);
    for case in 0..30 {
        let l = 2 + case % 3;
        let m = random_moments(&mut r, l);
        for (obj, method) in [
            (Objective::Sharpe, PortfolioMethod::Sharpe),
            (
                Objective::MaxDiversification,
                PortfolioMethod::MaxDiversification,
            ),
            (Objective::MinVariance, PortfolioMethod::MinVariance),
            (
                Objective::MaxReturn { cap: 0.8 },
                PortfolioMethod::MaxReturn,
            ),
        ] {
            let out = construct(method, &m, 0.8).unwrap();
            if out.min_variance_fallback {
                continue;
            }
            let value = obj.evaluate(&m, &out.weights);
            let grid = grid_oracle(&m, obj, 0.02).unwrap().value;
            let slack = 1e-3 * grid.abs().max(1e-12);
            if obj.maximize() {
                assert!(value >= grid - slack, "{method}: {value} < {grid}");
            } else {
                assert!(value <= grid + slack, "{method}: {value} > {grid}");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn every_method_returns_a_feasible_point(seed in 0u64..100_000, l in 1usize..7) {
        let mut r = rng(seed);
        let m = random_moments(&mut r, l);
        for method in PortfolioMethod::ALL {
            if method == PortfolioMethod::MaxReturn && l == 1 {
                continue;
            }
            let w = construct(method, &m, 0.8).unwrap().weights;
            prop_assert!(feasible(&w), "{method}: {w:?}");
            if method == PortfolioMethod::MaxReturn {
                prop_assert!(w.iter().all(|x| *x <= 0.8 + 1e-12));
            }
        }
    }

    #[test]
    fn ratio_objectives_ignore_covariance_scale(seed in 0u64..100_000, c in 0.01f64..100.0) {
        let mut r = rng(seed);
        let m = random_moments(&mut r, 3);
        let scaled = scaled_cov(&m, c);
        for method in [PortfolioMethod::Sharpe, PortfolioMethod::MaxDiversification] {
            let a = construct(method, &m, 0.8).unwrap().weights;
            let b = construct(method, &scaled, 0.8).unwrap().weights;
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6, "{method}: {a:?} vs {b:?}");
            }
        }
        let s1 = sharpe_ratio(&m, &max_sharpe(&m).unwrap().weights);
        let s2 = sharpe_ratio(&scaled, &max_sharpe(&scaled).unwrap().weights);
        prop_assert!((s2 - s1 / c.sqrt()).abs() < 1e-6 * s1.abs().max(1e-12));
    }

    #[test]
    fn mean_scale_leaves_return_rules_alone(seed in 0u64..100_000, c in 0.01f64..100.0) {
        let mut r = rng(seed);
        let m = random_moments(&mut r, 4);
        let scaled = RegimeMoments::new(m.mean.iter().map(|x| x * c).collect(), m.covariance.clone()).unwrap();
        prop_assert_eq!(max_return(&m, 0.8).unwrap().weights, max_return(&scaled, 0.8).unwrap().weights);
        let a = dynamic(&m).unwrap().weights;
        let b = dynamic(&scaled).unwrap().weights;
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn min_variance_never_worse_than_equal_weight(seed in 0u64..100_000, l in 2usize..8) {
        let mut r = rng(seed);
        let m = random_moments(&mut r, l);
        let mv = portfolio_variance(&m.covariance, &min_variance(&m).unwrap().weights);
        let ew = portfolio_variance(&m.covariance, &equal_weight(l).unwrap().weights);
        prop_assert!(mv <= ew * (1.0 + 1e-12));
    }
}
