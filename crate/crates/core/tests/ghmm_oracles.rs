mod common;

use common::*;
use proptest::prelude::*;
use regime_core::data::generate_synthetic;
use regime_core::ghmm::*;
use regime_core::scenarios::separated_states;

#[test]
fn forward_matches_path_enumeration() {
    let mut r = rng(11);
    for case in 0..60 {
        let k = 2 + case % 2;
        let t = if k == 2 { 4 + case % 5 } else { 3 + case % 4 };
        let l = 1 + case % 2;
        let model = random_model(&mut r, k, l);
        let rows = random_rows(&mut r, t, l);
        let oracle = enumerate_paths(&model, &rows);
        let panel = panel_from_rows(rows);
        let ll = log_likelihood(&model, &panel).unwrap();
        assert!(
            (ll - oracle.log_likelihood).abs() < 1e-9,
            "case {case}: {ll} vs {}",
            oracle.log_likelihood
        );
    }
}

#[test]
fn viterbi_matches_path_enumeration() {
    let mut r = rng(12);
    for case in 0..60 {
        let k = 2 + case % 2;
        let t = if k == 2 { 5 } else { 4 };
        let model = random_model(&mut r, k, 2);
        let rows = random_rows(&mut r, t, 2);
        let oracle = enumerate_paths(&model, &rows);
        let path = viterbi_decode(&model, &panel_from_rows(rows)).unwrap();
        assert_eq!(path, oracle.best_path, "case {case}");
    }
}

#[test]
fn posteriors_match_path_enumeration() {
    let mut r = rng(13);
    for case in 0..40 {
        let model = random_model(&mut r, 2, 1 + case % 3);
        let rows = random_rows(&mut r, 4, 1 + case % 3);
        let oracle = enumerate_paths(&model, &rows);
        let gamma = smoothed_state_probabilities(&model, &panel_from_rows(rows)).unwrap();
        for (g, o) in gamma.iter().zip(&oracle.gamma) {
            assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            for (a, b) in g.iter().zip(o) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn largest_enumerable_instance() {
    // 2^12 = 4096 paths
    let mut r = rng(14);
    let model = random_model(&mut r, 2, 2);
    let rows = random_rows(&mut r, 12, 2);
    let oracle = enumerate_paths(&model, &rows);
    let panel = panel_from_rows(rows);
    assert!((log_likelihood(&model, &panel).unwrap() - oracle.log_likelihood).abs() < 1e-9);
    assert_eq!(viterbi_decode(&model, &panel).unwrap(), oracle.best_path);
}

#[test]
fn identical_states_collapse_to_single_gaussian() {
    let mut r = rng(15);
    let single = random_model(&mut r, 1, 2);
    let twin = HmmModel {
        initial: vec![0.5, 0.5],
        transition: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        means: vec![single.means[0].clone(); 2],
        covariances: vec![single.covariances[0].clone(); 2],
    };
    let panel = panel_from_rows(random_rows(&mut r, 30, 2));
    let a = log_likelihood(&single, &panel).unwrap();
    let b = log_likelihood(&twin, &panel).unwrap();
    assert!((a - b).abs() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn relabelling_states_keeps_likelihood(seed in 0u64..10_000, k in 2usize..5) {
        let mut r = rng(seed);
        let model = random_model(&mut r, k, 2);
        let panel = panel_from_rows(random_rows(&mut r, 25, 2));
        let mut order: Vec<usize> = (0..k).collect();
        order.rotate_left(1);
        order.swap(0, k - 1);
        let a = log_likelihood(&model, &panel).unwrap();
        let b = log_likelihood(&model.permuted(&order), &panel).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn posterior_rows_are_distributions(seed in 0u64..10_000, k in 1usize..4, t in 1usize..40) {
        let mut r = rng(seed);
        let model = random_model(&mut r, k, 2);
        let gamma = smoothed_state_probabilities(&model, &panel_from_rows(random_rows(&mut r, t, 2))).unwrap();
        for row in gamma {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            prop_assert!(row.iter().all(|g| (0.0..=1.0).contains(g)));
        }
    }

    #[test]
    fn em_never_decreases_likelihood(seed in 0u64..10_000, k in 1usize..4) {
        let spec = separated_states(2.0, 300, seed);
        let (panel, _) = generate_synthetic(&spec).unwrap();
        let cfg = FitConfig { n_restarts: 2, max_iter: 100, seed, ..Default::default() };
        let (model, report) = fit_baum_welch(&panel, k, &cfg).unwrap();
        for w in report.trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} -> {}", w[0], w[1]);
        }
        prop_assert!(report.n_iterations >= 1);
        for row in &model.transition {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
        for c in &model.covariances {
            prop_assert!(nalgebra::DMatrix::from_fn(2, 2, |a, b| c[a][b]).cholesky().is_some());
        }
    }
}

fn recovery_error(seed: u64) -> (f64, f64) {
    let spec = separated_states(3.0, 5000, seed);
    let (panel, _) = generate_synthetic(&spec).unwrap();
    let cfg = FitConfig {
        n_restarts: 3,
        seed,
        ..Default::default()
    };
    let (model, _) = fit_baum_welch(&panel, 2, &cfg).unwrap();
    let mut best = (f64::INFINITY, f64::INFINITY);
    for order in [[0usize, 1], [1, 0]] {
        let m = model.permuted(&order);
        let mu = (0..2)
            .flat_map(|s| (0..2).map(move |j| (s, j)))
            .map(|(s, j)| (m.means[s][j] - spec.means[s][j]).abs())
            .fold(0.0, f64::max);
        let a = (0..2)
            .flat_map(|s| (0..2).map(move |j| (s, j)))
            .map(|(s, j)| (m.transition[s][j] - spec.transition[s][j]).abs())
            .fold(0.0, f64::max);
        if mu < best.0 {
            best = (mu, a);
        }
    }
    best
}

#[test]
fn recovers_separated_two_state_parameters() {
    for seed in 0..3 {
        let (mu, a) = recovery_error(seed);
        assert!(
            mu < 0.1 && a < 0.05,
            "seed {seed}: mean error {mu}, transition error {a}"
        );
    }
}

#[test]
fn single_regime_data_prefers_one_state() {
    let mut spec = separated_states(3.0, 2000, 3);
    spec.transition = vec![vec![1.0]];
    spec.means.truncate(1);
    spec.covariances.truncate(1);
    let (panel, _) = generate_synthetic(&spec).unwrap();
    let cfg = FitConfig {
        n_restarts: 3,
        seed: 3,
        ..Default::default()
    };
    let (best, table) = select_n_states(&panel, &[1, 2], &cfg).unwrap();
    assert_eq!(best, 1, "{table:?}");
}

#[test]
fn bic_table_shape() {
    let (panel, _) = generate_synthetic(&separated_states(3.0, 400, 4)).unwrap();
    let cfg = FitConfig {
        n_restarts: 2,
        max_iter: 50,
        seed: 4,
        ..Default::default()
    };
    let (_, table) = select_n_states(&panel, &[2, 3, 4, 5, 6], &cfg).unwrap();
    assert_eq!(table.len(), 5);
    assert!(table.iter().all(|e| e.bic.is_finite()));
    assert_eq!(
        table.iter().map(|e| e.n_states).collect::<Vec<_>>(),
        vec![2, 3, 4, 5, 6]
    );
    let (best, table) = select_n_states(&panel, &[1], &cfg).unwrap();
    assert_eq!((best, table.len()), (1, 1));
}

#[test]
fn extra_state_does_not_lower_training_likelihood() {
    let (panel, _) = generate_synthetic(&separated_states(3.0, 600, 5)).unwrap();
    let cfg = FitConfig {
        n_restarts: 4,
        seed: 5,
        ..Default::default()
    };
    let (m1, r1) = fit_baum_welch(&panel, 1, &cfg).unwrap();
    // nest the one-state fit inside a two-state model and continue EM
    let nested = HmmModel {
        initial: vec![0.5, 0.5],
        transition: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        means: vec![
            m1.means[0].iter().map(|m| m + 0.1).collect(),
            m1.means[0].iter().map(|m| m - 0.1).collect(),
        ],
        covariances: vec![m1.covariances[0].clone(); 2],
    };
    let start = log_likelihood(&nested, &panel).unwrap();
    let (_, r2) = fit_from(&panel, &nested, &cfg).unwrap();
    assert!(r2.log_likelihood >= start - 1e-6);
    assert!(r2.log_likelihood >= r1.log_likelihood - 1e-6);
}

#[test]
fn filtered_state_agrees_with_viterbi_on_separated_data() {
    let mut agree = 0;
    for seed in 0..100 {
        let (panel, _) = generate_synthetic(&separated_states(5.0, 60, seed)).unwrap();
        let spec = separated_states(5.0, 60, seed);
        let model = HmmModel {
            initial: vec![2.0 / 3.0, 1.0 / 3.0],
            transition: spec.transition.clone(),
            means: spec.means.clone(),
            covariances: spec.covariances.clone(),
        };
        let gamma = smoothed_state_probabilities(&model, &panel).unwrap();
        let last = gamma.last().unwrap();
        let g = usize::from(last[1] > last[0]);
        let v = *viterbi_decode(&model, &panel).unwrap().last().unwrap();
        agree += usize::from(g == v);
    }
    assert!(agree >= 99, "{agree}/100");
}

#[test]
fn online_decoder_tracks_batch_viterbi() {
    let mut r = rng(16);
    let model = random_model(&mut r, 3, 2);
    let rows = random_rows(&mut r, 40, 2);
    let mut dec = OnlineDecoder::new(&model).unwrap();
    for t in 0..rows.len() {
        let s = dec.push(&rows[t]).unwrap();
        let batch = viterbi_decode(&model, &panel_from_rows(rows[..=t].to_vec())).unwrap();
        assert_eq!(s, *batch.last().unwrap(), "t = {t}");
    }
}
