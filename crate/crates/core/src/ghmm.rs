//! Full-covariance Gaussian hidden Markov model: likelihood, decoding,
//! Baum-Welch training with random restarts, and BIC order selection.

use nalgebra::DMatrix;
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ReturnPanel;
use crate::error::{Error, Result};
use crate::inference::{self, log_matrix, log_vec, ViterbiFilter};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    /// `K x L` state means.
    pub means: Vec<Vec<f64>>,
    /// `K` symmetric `L x L` covariances.
    pub covariances: Vec<Vec<Vec<f64>>>,
}

impl HmmModel {
    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn n_features(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_states();
        let l = self.n_features();
        if k == 0 || l == 0 {
            return Err(Error::Parameter(
                "model needs at least one state and one feature".into(),
            ));
        }
        check_stochastic(&self.initial, "initial distribution")?;
        if self.transition.len() != k || self.means.len() != k || self.covariances.len() != k {
            return Err(Error::Shape {
                expected: k,
                got: self.transition.len(),
            });
        }
        for row in &self.transition {
            if row.len() != k {
                return Err(Error::Shape {
                    expected: k,
                    got: row.len(),
                });
            }
            check_stochastic(row, "transition row")?;
        }
        for (m, c) in self.means.iter().zip(&self.covariances) {
            if m.len() != l || c.len() != l || c.iter().any(|r| r.len() != l) {
                return Err(Error::Shape {
                    expected: l,
                    got: m.len(),
                });
            }
        }
        Ok(())
    }

    /// Relabels states so that new state `s` is old state `order[s]`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            initial: order.iter().map(|&i| self.initial[i]).collect(),
            transition: order
                .iter()
                .map(|&i| order.iter().map(|&j| self.transition[i][j]).collect())
                .collect(),
            means: order.iter().map(|&i| self.means[i].clone()).collect(),
            covariances: order.iter().map(|&i| self.covariances[i].clone()).collect(),
        }
    }

    /// States ordered by descending mean of the first feature, so state 0 is
    /// the high-return regime.
    pub fn sorted_by_first_mean(&self) -> Self {
        let mut order: Vec<usize> = (0..self.n_states()).collect();
        order.sort_by(|&a, &b| self.means[b][0].total_cmp(&self.means[a][0]));
        self.permuted(&order)
    }

    fn log_parameters(&self) -> (Vec<f64>, Vec<f64>) {
        (log_vec(&self.initial), log_matrix(&self.transition))
    }
}

fn check_stochastic(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Parameter(format!(
            "{what} has negative or non-finite entries"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-10 {
        return Err(Error::Parameter(format!("{what} sums to {s}")));
    }
    Ok(())
}

/// Multivariate normal density with a cached Cholesky factor.
#[derive(Debug, Clone)]
pub(crate) struct GaussianDensity {
    mean: Vec<f64>,
    /// Lower-triangular factor, row-major.
    chol: Vec<f64>,
    log_norm: f64,
}

impl GaussianDensity {
    pub(crate) fn new(mean: &[f64], cov: &[Vec<f64>]) -> Result<Self> {
        let l = mean.len();
        let m = DMatrix::from_fn(l, l, |a, b| 0.5 * (cov[a][b] + cov[b][a]));
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        let lower = chol.l();
        let log_det: f64 = 2.0 * lower.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !log_det.is_finite() {
            return Err(Error::Numerical(
                "covariance determinant is not finite".into(),
            ));
        }
        let mut flat = vec![0.0; l * l];
        for a in 0..l {
            for b in 0..=a {
                flat[a * l + b] = lower[(a, b)];
            }
        }
        Ok(Self {
            mean: mean.to_vec(),
            chol: flat,
            log_norm: -0.5 * (l as f64 * LN_2PI + log_det),
        })
    }

    pub(crate) fn log_density(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let l = self.mean.len();
        let mut quad = 0.0;
        for a in 0..l {
            let mut s = x[a] - self.mean[a];
            for b in 0..a {
                s -= self.chol[a * l + b] * scratch[b];
            }
            let z = s / self.chol[a * l + a];
            scratch[a] = z;
            quad += z * z;
        }
        self.log_norm - 0.5 * quad
    }
}

fn check_dims(model: &HmmModel, panel: &ReturnPanel) -> Result<()> {
    if model.n_features() != panel.n_cols() {
        return Err(Error::Shape {
            expected: model.n_features(),
            got: panel.n_cols(),
        });
    }
    Ok(())
}

/// Row-major `T x K` log emission densities.
pub fn log_emissions(model: &HmmModel, panel: &ReturnPanel) -> Result<Vec<f64>> {
    check_dims(model, panel)?;
    let densities = model
        .means
        .iter()
        .zip(&model.covariances)
        .map(|(m, c)| GaussianDensity::new(m, c))
        .collect::<Result<Vec<_>>>()?;
    let mut scratch = vec![0.0; panel.n_cols()];
    let mut out = Vec::with_capacity(panel.n_rows() * densities.len());
    for row in panel.rows() {
        for d in &densities {
            out.push(d.log_density(row, &mut scratch));
        }
    }
    Ok(out)
}

/// `log p(y | model)` by the log-space forward recursion.
pub fn log_likelihood(model: &HmmModel, panel: &ReturnPanel) -> Result<f64> {
    let log_b = log_emissions(model, panel)?;
    let (log_pi, log_a) = model.log_parameters();
    Ok(inference::forward(&log_pi, &log_a, &log_b).1)
}

pub fn viterbi_decode(model: &HmmModel, panel: &ReturnPanel) -> Result<Vec<usize>> {
    let log_b = log_emissions(model, panel)?;
    let (log_pi, log_a) = model.log_parameters();
    Ok(inference::viterbi(&log_pi, &log_a, &log_b).0)
}

/// Viterbi decoding one observation at a time. After each push the reported
/// state equals the last element of [`viterbi_decode`] on all rows so far.
#[derive(Debug, Clone)]
pub struct OnlineDecoder {
    densities: Vec<GaussianDensity>,
    log_pi: Vec<f64>,
    log_a: Vec<f64>,
    filter: ViterbiFilter,
    log_b: Vec<f64>,
    back: Vec<usize>,
    scratch: Vec<f64>,
    n_seen: usize,
}

impl OnlineDecoder {
    pub fn new(model: &HmmModel) -> Result<Self> {
        model.validate()?;
        let densities = model
            .means
            .iter()
            .zip(&model.covariances)
            .map(|(m, c)| GaussianDensity::new(m, c))
            .collect::<Result<Vec<_>>>()?;
        let (log_pi, log_a) = model.log_parameters();
        let k = model.n_states();
        Ok(Self {
            densities,
            log_pi,
            log_a,
            filter: ViterbiFilter::new(k),
            log_b: vec![0.0; k],
            back: vec![0; k],
            scratch: vec![0.0; model.n_features()],
            n_seen: 0,
        })
    }

    pub fn push(&mut self, row: &[f64]) -> Result<usize> {
        if row.len() != self.scratch.len() {
            return Err(Error::Shape {
                expected: self.scratch.len(),
                got: row.len(),
            });
        }
        for (lb, d) in self.log_b.iter_mut().zip(&self.densities) {
            *lb = d.log_density(row, &mut self.scratch);
        }
        self.filter
            .step(&self.log_pi, &self.log_a, &self.log_b, &mut self.back);
        self.n_seen += 1;
        Ok(self.filter.best_state())
    }

    pub fn n_seen(&self) -> usize {
        self.n_seen
    }
}

/// `T x K` matrix of `P(x_t = i | y)`.
pub fn smoothed_state_probabilities(
    model: &HmmModel,
    panel: &ReturnPanel,
) -> Result<Vec<Vec<f64>>> {
    let log_b = log_emissions(model, panel)?;
    let (log_pi, log_a) = model.log_parameters();
    let post = inference::forward_backward(&log_pi, &log_a, &log_b);
    Ok(post
        .gamma
        .chunks(model.n_states())
        .map(<[f64]>::to_vec)
        .collect())
}

/// Free parameters of a `K`-state full-covariance model on `L` features.
pub fn n_free_parameters(k: usize, l: usize) -> usize {
    (k - 1) + k * (k - 1) + k * l + k * l * (l + 1) / 2
}

pub fn bic_from_log_likelihood(log_likelihood: f64, k: usize, l: usize, n_obs: usize) -> f64 {
    -2.0 * log_likelihood + n_free_parameters(k, l) as f64 * (n_obs as f64).ln()
}

pub fn bic(model: &HmmModel, panel: &ReturnPanel) -> Result<f64> {
    let ll = log_likelihood(model, panel)?;
    Ok(bic_from_log_likelihood(
        ll,
        model.n_states(),
        model.n_features(),
        panel.n_rows(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    /// Relative log-likelihood change that stops EM.
    pub tol: f64,
    pub max_iter: usize,
    pub n_restarts: usize,
    /// Ridge added to every covariance diagonal. `None` uses
    /// `1e-8 * trace(sample covariance) / L`.
    pub cov_reg: Option<f64>,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            n_restarts: 10,
            cov_reg: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub log_likelihood: f64,
    /// Number of M-steps performed.
    pub n_iterations: usize,
    pub converged: bool,
    pub restart_index: usize,
    /// Log-likelihood of the initial parameters followed by the value after
    /// every M-step.
    pub trace: Vec<f64>,
}

/// Seed for restart `r` derived from a master seed.
pub(crate) fn restart_seed(seed: u64, r: usize) -> u64 {
    let mut z = seed.wrapping_add((r as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn dirichlet(rng: &mut impl Rng, k: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut draws: Vec<f64> = (0..k).map(|_| rng.sample(gamma)).collect();
    let s: f64 = draws.iter().sum();
    if s > 0.0 {
        draws.iter_mut().for_each(|d| *d /= s);
    } else {
        draws.iter_mut().for_each(|d| *d = 1.0 / k as f64);
    }
    draws
}

fn validate_training_panel(panel: &ReturnPanel, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Parameter(
            "number of states must be at least 1".into(),
        ));
    }
    if panel.n_rows() <= k {
        return Err(Error::InsufficientData(format!(
            "{} observations for {k} states",
            panel.n_rows()
        )));
    }
    let cov = panel.covariance();
    let means = panel.column_means();
    if let Some(j) = (0..panel.n_cols()).find(|&j| !(cov[j][j].sqrt() > 1e-12 * means[j].abs())) {
        return Err(Error::Parameter(format!(
            "column '{}' has zero variance",
            panel.assets()[j]
        )));
    }
    Ok(())
}

fn resolve_reg(panel: &ReturnPanel, config: &FitConfig) -> f64 {
    config.cov_reg.unwrap_or_else(|| {
        let cov = panel.covariance();
        let trace: f64 = (0..cov.len()).map(|j| cov[j][j]).sum();
        1e-8 * trace / cov.len() as f64
    })
}

fn random_initial_model(panel: &ReturnPanel, k: usize, reg: f64, rng: &mut impl Rng) -> HmmModel {
    let l = panel.n_cols();
    let mut cov = panel.covariance();
    for (j, row) in cov.iter_mut().enumerate() {
        row[j] += reg;
    }
    let sd: Vec<f64> = (0..l).map(|j| cov[j][j].sqrt()).collect();
    let rows = sample_indices(rng, panel.n_rows(), k);
    let means = rows
        .iter()
        .map(|t| {
            panel
                .row(t)
                .iter()
                .zip(&sd)
                .map(|(y, s)| {
                    let e: f64 = rng.sample(StandardNormal);
                    y + 0.01 * s * e
                })
                .collect()
        })
        .collect();
    HmmModel {
        initial: dirichlet(rng, k, 10.0),
        transition: (0..k).map(|_| dirichlet(rng, k, 10.0)).collect(),
        means,
        covariances: vec![cov; k],
    }
}

/// One EM iteration's M-step from posterior quantities.
fn m_step(panel: &ReturnPanel, post: &inference::Posterior, prev: &HmmModel, reg: f64) -> HmmModel {
    let k = prev.n_states();
    let l = panel.n_cols();
    let initial = post.gamma_row(0).to_vec();
    let mut transition = prev.transition.clone();
    for i in 0..k {
        let row = &post.xi_sum[i * k..(i + 1) * k];
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            transition[i] = row.iter().map(|v| v / s).collect();
        }
    }

    let mut means = prev.means.clone();
    let mut covariances = prev.covariances.clone();
    for i in 0..k {
        let weight: f64 = (0..panel.n_rows()).map(|t| post.gamma[t * k + i]).sum();
        if weight < 1e-10 {
            continue;
        }
        let mut mu = vec![0.0; l];
        for (t, row) in panel.rows().enumerate() {
            let g = post.gamma[t * k + i];
            for (m, y) in mu.iter_mut().zip(row) {
                *m += g * y;
            }
        }
        mu.iter_mut().for_each(|m| *m /= weight);
        let mut cov = vec![vec![0.0; l]; l];
        let mut dev = vec![0.0; l];
        for (t, row) in panel.rows().enumerate() {
            let g = post.gamma[t * k + i];
            for a in 0..l {
                dev[a] = row[a] - mu[a];
            }
            for a in 0..l {
                let ga = g * dev[a];
                for b in a..l {
                    cov[a][b] += ga * dev[b];
                }
            }
        }
        for a in 0..l {
            for b in a..l {
                cov[a][b] /= weight;
                cov[b][a] = cov[a][b];
            }
            cov[a][a] += reg;
        }
        means[i] = mu;
        covariances[i] = cov;
    }
    HmmModel {
        initial,
        transition,
        means,
        covariances,
    }
}

fn run_em(
    panel: &ReturnPanel,
    init: HmmModel,
    config: &FitConfig,
    reg: f64,
    restart: usize,
) -> Result<(HmmModel, FitReport)> {
    let mut model = init;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    loop {
        let log_b = log_emissions(&model, panel)?;
        let (log_pi, log_a) = model.log_parameters();
        let post = inference::forward_backward(&log_pi, &log_a, &log_b);
        let ll = post.log_likelihood;
        if !ll.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite log-likelihood at iteration {iterations}"
            )));
        }
        if let Some(&prev) = trace.last() {
            let change = (ll - prev) / f64::max(f64::abs(prev), 1.0);
            if change.abs() < config.tol {
                converged = true;
            }
        }
        trace.push(ll);
        if converged || iterations >= config.max_iter {
            break;
        }
        model = m_step(panel, &post, &model, reg);
        iterations += 1;
    }
    let report = FitReport {
        log_likelihood: *trace.last().expect("at least one evaluation"),
        n_iterations: iterations.max(1),
        converged,
        restart_index: restart,
        trace,
    };
    Ok((model, report))
}

/// Baum-Welch with `n_restarts` random initialisations; the restart with the
/// highest final log-likelihood wins (ties to the lowest index). States of
/// the returned model are sorted by descending mean of the first feature.
pub fn fit_baum_welch(
    panel: &ReturnPanel,
    k: usize,
    config: &FitConfig,
) -> Result<(HmmModel, FitReport)> {
    validate_training_panel(panel, k)?;
    let reg = resolve_reg(panel, config);
    let restarts = config.n_restarts.max(1);
    let results: Vec<Result<(HmmModel, FitReport)>> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(config.seed, r));
            let init = random_initial_model(panel, k, reg, &mut rng);
            run_em(panel, init, config, reg, r)
        })
        .collect();
    let mut best: Option<(HmmModel, FitReport)> = None;
    let mut last_err = None;
    for res in results {
        match res {
            Ok((m, rep)) => {
                let better = best
                    .as_ref()
                    .is_none_or(|(_, b)| rep.log_likelihood > b.log_likelihood);
                if better {
                    best = Some((m, rep));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((m, rep)) => Ok((m.sorted_by_first_mean(), rep)),
        None => Err(Error::Numerical(format!(
            "all {restarts} restarts failed; last error: {}",
            last_err.map_or_else(|| "none".into(), |e| e.to_string())
        ))),
    }
}

/// Single EM run started from `init`; state labels are left as they are so
/// that a warm start keeps the labelling of the previous fit.
pub fn fit_from(
    panel: &ReturnPanel,
    init: &HmmModel,
    config: &FitConfig,
) -> Result<(HmmModel, FitReport)> {
    init.validate()?;
    check_dims(init, panel)?;
    validate_training_panel(panel, init.n_states())?;
    let reg = resolve_reg(panel, config);
    run_em(panel, init.clone(), config, reg, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicEntry {
    pub n_states: usize,
    pub log_likelihood: f64,
    pub n_parameters: usize,
    pub bic: f64,
}

/// Fits every candidate order with the same restart budget and returns the
/// BIC minimiser together with the full table.
pub fn select_n_states(
    panel: &ReturnPanel,
    candidates: &[usize],
    config: &FitConfig,
) -> Result<(usize, Vec<BicEntry>)> {
    if candidates.is_empty() {
        return Err(Error::Precondition("no candidate state counts".into()));
    }
    let mut table = Vec::with_capacity(candidates.len());
    for &k in candidates {
        let (_, report) = fit_baum_welch(panel, k, config)?;
        let l = panel.n_cols();
        table.push(BicEntry {
            n_states: k,
            log_likelihood: report.log_likelihood,
            n_parameters: n_free_parameters(k, l),
            bic: bic_from_log_likelihood(report.log_likelihood, k, l, panel.n_rows()),
        });
    }
    let best = table
        .iter()
        .min_by(|a, b| a.bic.total_cmp(&b.bic))
        .expect("non-empty table")
        .n_states;
    Ok((best, table))
}

/// JSON document for a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmDocument {
    pub n_states: usize,
    pub n_features: usize,
    #[serde(default)]
    pub features: Vec<String>,
    #[serde(flatten)]
    pub model: HmmModel,
    #[serde(default)]
    pub fit_report: Option<FitReport>,
}

impl HmmDocument {
    pub fn new(model: HmmModel, features: Vec<String>, fit_report: Option<FitReport>) -> Self {
        Self {
            n_states: model.n_states(),
            n_features: model.n_features(),
            features,
            model,
            fit_report,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        doc.model.validate()?;
        if doc.n_states != doc.model.n_states() || doc.n_features != doc.model.n_features() {
            return Err(Error::Format(
                "declared dimensions disagree with model arrays".into(),
            ));
        }
        Ok(doc)
    }
}
