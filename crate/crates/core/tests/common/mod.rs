//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regime_core::data::{business_days, default_start_date, ReturnPanel};
use regime_core::ghmm::HmmModel;
use regime_core::portfolio::RegimeMoments;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn panel_from_rows(rows: Vec<Vec<f64>>) -> ReturnPanel {
    let names = (0..rows[0].len()).map(|j| format!("f{j}")).collect();
    ReturnPanel::from_rows(business_days(default_start_date(), rows.len()), names, rows).unwrap()
}

fn random_stochastic(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Random SPD matrix `B B' + 0.1 I`.
pub fn random_spd(rng: &mut ChaCha8Rng, l: usize, scale: f64) -> Vec<Vec<f64>> {
    let b = DMatrix::from_fn(l, l, |_, _| rng.random_range(-1.0..1.0));
    let m = &b * b.transpose() + DMatrix::identity(l, l) * 0.1;
    (0..l)
        .map(|a| (0..l).map(|c| m[(a, c)] * scale).collect())
        .collect()
}

pub fn random_model(rng: &mut ChaCha8Rng, k: usize, l: usize) -> HmmModel {
    HmmModel {
        initial: random_stochastic(rng, k),
        transition: (0..k).map(|_| random_stochastic(rng, k)).collect(),
        means: (0..k)
            .map(|_| (0..l).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect(),
        covariances: (0..k).map(|_| random_spd(rng, l, 1.0)).collect(),
    }
}

pub fn random_rows(rng: &mut ChaCha8Rng, t: usize, l: usize) -> Vec<Vec<f64>> {
    (0..t)
        .map(|_| (0..l).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect()
}

/// Log density via explicit inverse and determinant.
pub fn gaussian_log_density(x: &[f64], mean: &[f64], cov: &[Vec<f64>]) -> f64 {
    let l = x.len();
    let m = DMatrix::from_fn(l, l, |a, b| cov[a][b]);
    let inv = m.clone().try_inverse().unwrap();
    let d = DVector::from_iterator(l, x.iter().zip(mean).map(|(a, b)| a - b));
    let quad = (d.transpose() * inv * &d)[(0, 0)];
    -0.5 * (l as f64 * (2.0 * std::f64::consts::PI).ln() + m.determinant().ln() + quad)
}

pub struct Enumeration {
    pub log_likelihood: f64,
    pub best_path: Vec<usize>,
    pub best_score: f64,
    /// `gamma[t][i]`
    pub gamma: Vec<Vec<f64>>,
}

/// Exhaustive sum and max over all `K^T` state paths.
pub fn enumerate_paths(model: &HmmModel, rows: &[Vec<f64>]) -> Enumeration {
    let k = model.initial.len();
    let t_len = rows.len();
    let log_b: Vec<Vec<f64>> = rows
        .iter()
        .map(|x| {
            (0..k)
                .map(|i| gaussian_log_density(x, &model.means[i], &model.covariances[i]))
                .collect()
        })
        .collect();
    let n_paths = k.pow(t_len as u32);
    let mut scores = Vec::with_capacity(n_paths);
    let mut paths = Vec::with_capacity(n_paths);
    for code in 0..n_paths {
        let mut path = vec![0; t_len];
        let mut c = code;
        for slot in path.iter_mut() {
            *slot = c % k;
            c /= k;
        }
        let mut s = model.initial[path[0]].ln() + log_b[0][path[0]];
        for t in 1..t_len {
            s += model.transition[path[t - 1]][path[t]].ln() + log_b[t][path[t]];
        }
        scores.push(s);
        paths.push(path);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
    let ll = max + total.ln();
    let mut gamma = vec![vec![0.0; k]; t_len];
    for (p, s) in paths.iter().zip(&scores) {
        let w = (s - ll).exp();
        for t in 0..t_len {
            gamma[t][p[t]] += w;
        }
    }
    let best = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    Enumeration {
        log_likelihood: ll,
        best_path: paths[best].clone(),
        best_score: scores[best],
        gamma,
    }
}

pub fn random_moments(rng: &mut ChaCha8Rng, l: usize) -> RegimeMoments {
    let cov = random_spd(rng, l, 1e-4);
    let mean = (0..l).map(|_| rng.random_range(-0.001..0.002)).collect();
    RegimeMoments::new(mean, cov).unwrap()
}
