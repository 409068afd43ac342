#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regime_core::data::{generate_synthetic, SyntheticSpec};
use regime_core::fshmm::*;
use regime_core::ghmm::{self, HmmModel};
use regime_core::inference::log_matrix;
use regime_core::scenarios::saliency_benchmark;

fn normal_ln(x: f64, m: f64, v: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v)
}

fn random_fshmm(r: &mut ChaCha8Rng, k: usize, l: usize) -> FshmmModel {
    let stoch = |r: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..k).map(|_| r.random_range(0.1..1.0)).collect();
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect::<Vec<_>>()
    };
    FshmmModel {
        initial: stoch(r),
        transition: (0..k).map(|_| stoch(r)).collect(),
        means: (0..k)
            .map(|_| (0..l).map(|_| r.random_range(-2.0..2.0)).collect())
            .collect(),
        variances: (0..k)
            .map(|_| (0..l).map(|_| r.random_range(0.3..2.0)).collect())
            .collect(),
        saliency: (0..l).map(|_| r.random_range(0.0..1.0)).collect(),
        noise_means: (0..l).map(|_| r.random_range(-1.0..1.0)).collect(),
        noise_variances: (0..l).map(|_| r.random_range(0.3..2.0)).collect(),
    }
}

fn mixture_emission(m: &FshmmModel, x: &[f64], i: usize) -> f64 {
    x.iter()
        .enumerate()
        .map(|(l, &y)| {
            let a = m.saliency[l] * normal_ln(y, m.means[i][l], m.variances[i][l]).exp();
            let b =
                (1.0 - m.saliency[l]) * normal_ln(y, m.noise_means[l], m.noise_variances[l]).exp();
            (a + b).ln()
        })
        .sum()
}

#[test]
fn likelihood_matches_path_enumeration() {
    let mut r = rng(21);
    for case in 0..30 {
        let k = 2 + case % 2;
        let t = if k == 2 { 6 } else { 4 };
        let m = random_fshmm(&mut r, k, 3);
        let rows = random_rows(&mut r, t, 3);
        let mut scores = Vec::new();
        for code in 0..k.pow(t as u32) {
            let mut c = code;
            let path: Vec<usize> = (0..t)
                .map(|_| {
                    let s = c % k;
                    c /= k;
                    s
                })
                .collect();
            let mut s = m.initial[path[0]].ln() + mixture_emission(&m, &rows[0], path[0]);
            for u in 1..t {
                s += m.transition[path[u - 1]][path[u]].ln()
                    + mixture_emission(&m, &rows[u], path[u]);
            }
            scores.push(s);
        }
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let oracle = max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
        let ll = log_likelihood(&m, &panel_from_rows(rows)).unwrap();
        assert!((ll - oracle).abs() < 1e-9, "case {case}: {ll} vs {oracle}");
    }
}

#[test]
fn full_saliency_is_a_diagonal_hmm() {
    let mut r = rng(22);
    for _ in 0..10 {
        let mut m = random_fshmm(&mut r, 2, 3);
        m.saliency = vec![1.0; 3];
        let diag = HmmModel {
            initial: m.initial.clone(),
            transition: m.transition.clone(),
            means: m.means.clone(),
            covariances: m
                .variances
                .iter()
                .map(|v| {
                    (0..3)
                        .map(|a| (0..3).map(|b| if a == b { v[a] } else { 0.0 }).collect())
                        .collect()
                })
                .collect(),
        };
        let panel = panel_from_rows(random_rows(&mut r, 50, 3));
        let a = log_likelihood(&m, &panel).unwrap();
        let b = ghmm::log_likelihood(&diag, &panel).unwrap();
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn zero_saliency_ignores_states() {
    let mut r = rng(23);
    let mut m = random_fshmm(&mut r, 3, 2);
    m.saliency = vec![0.0; 2];
    let rows = random_rows(&mut r, 40, 2);
    let expected: f64 = rows
        .iter()
        .flat_map(|x| {
            x.iter()
                .enumerate()
                .map(|(l, &y)| normal_ln(y, m.noise_means[l], m.noise_variances[l]))
        })
        .sum();
    let ll = log_likelihood(&m, &panel_from_rows(rows)).unwrap();
    assert!((ll - expected).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn e_step_identities(seed in 0u64..10_000, k in 1usize..4, t in 2usize..30) {
        let mut r = rng(seed);
        let m = random_fshmm(&mut r, k, 3);
        let panel = panel_from_rows(random_rows(&mut r, t, 3));
        let es = e_step(&m, &panel).unwrap();
        for s in 0..t {
            let gamma = es.posterior.gamma_row(s);
            prop_assert!((gamma.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            for i in 0..k {
                for l in 0..3 {
                    let x = es.index(s, i, l);
                    prop_assert!((es.g[x] - (es.e[x] + es.h[x])).abs() <= 1e-12 * es.g[x].abs().max(1e-300));
                    prop_assert!((es.u[x] + es.v[x] - gamma[i]).abs() < 1e-12);
                    prop_assert!(es.u[x] >= 0.0 && es.v[x] >= -1e-15);
                }
            }
        }
        let log_a = log_matrix(&m.transition);
        for s in 1..t {
            let xi = es.posterior.xi(s, &log_a, &es.log_emissions);
            let prev = es.posterior.gamma_row(s - 1);
            for i in 0..k {
                let row: f64 = xi[i * k..(i + 1) * k].iter().sum();
                prop_assert!((row - prev[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn map_em_is_monotone(seed in 0u64..10_000) {
        let (panel, _) = generate_synthetic(&saliency_benchmark(2, 200, seed)).unwrap();
        let priors = default_priors(&panel, 2, 0.1).unwrap();
        let cfg = FshmmConfig { n_restarts: 1, max_iter: 60, seed, ..Default::default() };
        let (_, rep) = fit_fshmm_map(&panel, 2, &priors, &cfg).unwrap();
        for w in rep.trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-6 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
        prop_assert!(rep.saliency.iter().all(|r| (0.0..=1.0).contains(r)));
    }
}

#[test]
fn saliency_update_without_prior_is_the_mean_mass() {
    assert_eq!(saliency_update(150.0, 200, 0.0), 0.75);
    // with k > 0 the root lies below the unpenalised value
    let r = saliency_update(150.0, 200, 50.0);
    assert!(r < 0.75 && r > 0.0);
    assert!((50.0 * r * r - 250.0 * r + 150.0).abs() < 1e-9);
}

#[test]
fn table_a3_threshold_selection() {
    let rho = [0.986, 0.986, 0.190, 0.994, 0.995, 0.017, 0.007, 0.018];
    assert_eq!(select_features(&rho, 0.9).unwrap(), vec![0, 1, 3, 4]);
    assert_eq!(
        select_features(&[0.99, 0.02, 0.95], 0.5).unwrap(),
        vec![0, 2]
    );
    assert!(select_features(&[0.1, 0.2], 0.5).unwrap().is_empty());
    assert!(select_features(&[0.1], 1.0).is_err());
}

#[test]
fn default_priors_follow_length() {
    let (panel, _) = generate_synthetic(&saliency_benchmark(3, 3800, 0)).unwrap();
    let p = default_priors(&panel, 2, 0.25).unwrap();
    assert!(p.saliency_weight.iter().all(|k| (k - 950.0).abs() < 1e-9));
    let (panel, _) = generate_synthetic(&saliency_benchmark(3, 2000, 0)).unwrap();
    let p = default_priors(&panel, 2, 0.025).unwrap();
    assert!(p.saliency_weight.iter().all(|k| (k - 50.0).abs() < 1e-9));
}

#[test]
fn strongly_state_dependent_feature_is_kept_without_prior_cost() {
    let (panel, _) = generate_synthetic(&saliency_benchmark(3, 1000, 7)).unwrap();
    let priors = default_priors(&panel, 2, 0.0).unwrap();
    let cfg = FshmmConfig {
        n_restarts: 2,
        seed: 7,
        ..Default::default()
    };
    let (_, rep) = fit_fshmm_map(&panel, 2, &priors, &cfg).unwrap();
    assert!(
        rep.saliency[..5].iter().all(|r| *r > 0.9),
        "{:?}",
        rep.saliency
    );
}

#[test]
fn higher_prior_cost_never_raises_total_saliency() {
    let (panel, _) = generate_synthetic(&saliency_benchmark(3, 800, 8)).unwrap();
    let cfg = FshmmConfig {
        n_restarts: 2,
        seed: 8,
        ..Default::default()
    };
    let mut last = f64::INFINITY;
    for scale in [0.0, 0.05, 0.25, 1.0] {
        let priors = default_priors(&panel, 2, scale).unwrap();
        let (_, rep) = fit_fshmm_map(&panel, 2, &priors, &cfg).unwrap();
        let total: f64 = rep.saliency.iter().sum();
        assert!(total <= last + 1e-9, "k scale {scale}: {total} > {last}");
        last = total;
    }
}

#[test]
fn noise_saliency_with_ten_relevant_features() {
    let mu: Vec<f64> = (0..10)
        .map(|j| if j % 3 == 0 { -2.0 } else { 2.0 })
        .collect();
    let eye: Vec<Vec<f64>> = (0..10)
        .map(|a| (0..10).map(|b| f64::from(u8::from(a == b))).collect())
        .collect();
    let spec = SyntheticSpec {
        transition: vec![vec![0.98, 0.02], vec![0.04, 0.96]],
        means: vec![mu.clone(), mu.iter().map(|m| -m).collect()],
        covariances: vec![eye.clone(), eye],
        n_noise: 5,
        noise_mean: 0.0,
        noise_var: 1.0,
        length: 2000,
        seed: 9,
        start_state: None,
        start_date: None,
    };
    let (panel, _) = generate_synthetic(&spec).unwrap();
    let priors = default_priors(&panel, 2, 0.025).unwrap();
    let cfg = FshmmConfig {
        n_restarts: 2,
        seed: 9,
        ..Default::default()
    };
    let (_, rep) = fit_fshmm_map(&panel, 2, &priors, &cfg).unwrap();
    assert!(
        rep.saliency[10..].iter().all(|r| *r < 0.3),
        "{:?}",
        rep.saliency
    );
}

#[test]
fn invalid_priors_are_rejected() {
    let (panel, _) = generate_synthetic(&saliency_benchmark(1, 100, 0)).unwrap();
    let mut priors = default_priors(&panel, 2, 0.1).unwrap();
    priors.variance_scale[0][0] = -1.0;
    let err = fit_fshmm_map(&panel, 2, &priors, &FshmmConfig::default()).unwrap_err();
    assert!(matches!(err, regime_core::Error::Parameter(_)));
}
