//! Ready-made synthetic generator settings used by the experiments, the
//! command-line tool and the test suites.

use crate::data::SyntheticSpec;

fn diagonal(variances: &[f64]) -> Vec<Vec<f64>> {
    (0..variances.len())
        .map(|a| {
            (0..variances.len())
                .map(|b| if a == b { variances[a] } else { 0.0 })
                .collect()
        })
        .collect()
}

fn correlated(vols: &[f64], rho: f64) -> Vec<Vec<f64>> {
    (0..vols.len())
        .map(|a| {
            (0..vols.len())
                .map(|b| {
                    if a == b {
                        vols[a] * vols[a]
                    } else {
                        rho * vols[a] * vols[b]
                    }
                })
                .collect()
        })
        .collect()
}

/// Five strongly state-dependent unit-variance series followed by
/// `n_noise` independent N(0, 1) series, two persistent states.
pub fn saliency_benchmark(n_noise: usize, length: usize, seed: u64) -> SyntheticSpec {
    let mu: Vec<f64> = vec![2.0, 1.75, 2.25, -2.0, 1.8];
    SyntheticSpec {
        transition: vec![vec![0.98, 0.02], vec![0.04, 0.96]],
        means: vec![mu.clone(), mu.iter().map(|m| -m).collect()],
        covariances: vec![diagonal(&[1.0; 5]), diagonal(&[1.0; 5])],
        n_noise,
        noise_mean: 0.0,
        noise_var: 1.0,
        length,
        seed,
        start_state: None,
        start_date: None,
    }
}

/// Two-state Gaussian HMM whose state means differ by `separation` standard
/// deviations in each of two unit-variance features.
pub fn separated_states(separation: f64, length: usize, seed: u64) -> SyntheticSpec {
    let half = separation / 2.0;
    SyntheticSpec {
        transition: vec![vec![0.95, 0.05], vec![0.10, 0.90]],
        means: vec![vec![-half, half], vec![half, -half]],
        covariances: vec![diagonal(&[1.0, 1.0]), correlated(&[1.0, 1.0], 0.3)],
        n_noise: 0,
        noise_mean: 0.0,
        noise_var: 1.0,
        length,
        seed,
        start_state: None,
        start_date: None,
    }
}

/// Daily returns of four assets ordered from aggressive to defensive. State 0
/// is an expansion; state 1 is a contraction with negative means and twice
/// the volatility. Regimes last about 250 and 100 days on average.
/// `n_noise` state-independent columns with the same scale are appended.
pub fn regime_market(n_noise: usize, length: usize, seed: u64) -> SyntheticSpec {
    let good_mu = vec![0.0016, 0.0010, 0.0005, 0.0002];
    let bad_mu = vec![-0.0030, -0.0020, -0.0010, -0.0002];
    let vols = [0.012, 0.010, 0.008, 0.006];
    let bad_vols: Vec<f64> = vols.iter().map(|v| 2.0 * v).collect();
    SyntheticSpec {
        transition: vec![vec![0.996, 0.004], vec![0.01, 0.99]],
        means: vec![good_mu, bad_mu],
        covariances: vec![correlated(&vols, 0.3), correlated(&bad_vols, 0.3)],
        n_noise,
        noise_mean: 0.0,
        noise_var: 1e-4,
        length,
        seed,
        start_state: Some(0),
        start_date: None,
    }
}

/// [`regime_market`] with a third, short-lived state: brief shocks inside
/// expansions that look like a contraction on the day but last about three
/// days. A model that reacts to single days trades on every shock.
pub fn regime_market_with_shocks(length: usize, seed: u64) -> SyntheticSpec {
    let mut spec = regime_market(0, length, seed);
    spec.transition = vec![
        vec![0.976, 0.004, 0.02],
        vec![0.01, 0.99, 0.0],
        vec![0.3, 0.0, 0.7],
    ];
    spec.means.push(spec.means[1].clone());
    spec.covariances.push(spec.covariances[1].clone());
    spec
}

/// The four [`regime_market`] assets followed by five unit-variance regime
/// indicators whose means move by `separation` standard deviations between
/// the states, then `n_noise` N(0, 1) columns. Training features are the
/// columns from [`REGIME_MARKET_ASSETS`] on.
pub fn regime_indicators(
    separation: f64,
    n_noise: usize,
    length: usize,
    seed: u64,
) -> SyntheticSpec {
    let mut spec = regime_market(0, length, seed);
    let signs = [1.0, 1.0, -1.0, 1.0, -1.0];
    for (s, sign) in [1.0, -1.0].iter().enumerate() {
        spec.means[s].extend(signs.iter().map(|g| sign * g * separation / 2.0));
        let assets = spec.covariances[s].clone();
        let n = assets.len() + signs.len();
        let mut cov = vec![vec![0.0; n]; n];
        for (a, row) in assets.iter().enumerate() {
            cov[a][..row.len()].copy_from_slice(row);
        }
        for j in assets.len()..n {
            cov[j][j] = 1.0;
        }
        spec.covariances[s] = cov;
    }
    spec.n_noise = n_noise;
    spec.noise_var = 1.0;
    spec
}

/// Number of asset columns in [`regime_market`] panels.
pub const REGIME_MARKET_ASSETS: usize = 4;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenarios_validate() {
        saliency_benchmark(3, 100, 0).validate().unwrap();
        separated_states(3.0, 100, 0).validate().unwrap();
        regime_market(5, 100, 0).validate().unwrap();
        regime_indicators(1.0, 5, 100, 0).validate().unwrap();
        regime_market_with_shocks(100, 0).validate().unwrap();
    }
}
