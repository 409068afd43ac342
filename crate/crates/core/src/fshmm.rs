//! Feature-saliency hidden Markov model trained by MAP expectation
//! maximisation.
//!
//! Every feature `l` is a two-component mixture inside each state `i`: with
//! probability `rho_l` it follows the state-dependent Gaussian
//! `N(mu_il, sigma2_il)`, otherwise the state-independent `N(eps_l, tau2_l)`.
//! Features are conditionally independent given the state, so emissions are
//! products of univariate densities. The saliency `rho_l` carries an
//! exponential prior with weight `k_l`; a larger `k_l` demands more evidence
//! before a feature is declared relevant.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ReturnPanel;
use crate::error::{Error, Result};
use crate::ghmm::{dirichlet, restart_seed};
use crate::inference::{self, log_matrix, log_vec, Posterior};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Saliencies are kept inside `[RHO_FLOOR, 1 - RHO_FLOOR]` during fitting.
pub const RHO_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FshmmModel {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    /// `I x L` state-dependent means.
    pub means: Vec<Vec<f64>>,
    /// `I x L` state-dependent variances.
    pub variances: Vec<Vec<f64>>,
    pub saliency: Vec<f64>,
    /// Mean of the state-independent component, per feature.
    pub noise_means: Vec<f64>,
    pub noise_variances: Vec<f64>,
}

impl FshmmModel {
    pub fn n_states(&self) -> usize {
        self.initial.len()
    }

    pub fn n_features(&self) -> usize {
        self.saliency.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_states();
        let l = self.n_features();
        if k == 0 || l == 0 {
            return Err(Error::Parameter(
                "model needs at least one state and one feature".into(),
            ));
        }
        let stochastic =
            |p: &[f64]| p.iter().all(|v| *v >= 0.0) && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-10;
        if !stochastic(&self.initial)
            || self.transition.len() != k
            || !self
                .transition
                .iter()
                .all(|r| r.len() == k && stochastic(r))
        {
            return Err(Error::Parameter(
                "initial or transition probabilities are not stochastic".into(),
            ));
        }
        if self.means.len() != k
            || self.variances.len() != k
            || self
                .means
                .iter()
                .chain(&self.variances)
                .any(|r| r.len() != l)
        {
            return Err(Error::Shape {
                expected: l,
                got: self.means.len(),
            });
        }
        if self.noise_means.len() != l || self.noise_variances.len() != l {
            return Err(Error::Shape {
                expected: l,
                got: self.noise_means.len(),
            });
        }
        if self
            .variances
            .iter()
            .flatten()
            .chain(&self.noise_variances)
            .any(|v| !(*v > 0.0))
        {
            return Err(Error::Parameter("variances must be positive".into()));
        }
        if self.saliency.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Parameter("saliencies must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Conjugate-style priors of the MAP objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FshmmPriors {
    /// Dirichlet concentration for the initial distribution.
    pub initial_concentration: Vec<f64>,
    /// Dirichlet concentration for each transition row.
    pub transition_concentration: Vec<Vec<f64>>,
    /// Normal prior on `mu_il`: mean `m_il` and standard deviation `s_il`.
    pub mean_prior_mean: Vec<Vec<f64>>,
    pub mean_prior_sd: Vec<Vec<f64>>,
    /// Inverse-gamma prior on `sigma2_il`: shape `zeta_il`, scale `eta_il`.
    pub variance_shape: Vec<Vec<f64>>,
    pub variance_scale: Vec<Vec<f64>>,
    /// Normal prior on `eps_l`: mean `b_l`, standard deviation `c_l`.
    pub noise_mean_prior_mean: Vec<f64>,
    pub noise_mean_prior_sd: Vec<f64>,
    /// Inverse-gamma prior on `tau2_l`: shape `nu_l`, scale `psi_l`.
    pub noise_variance_shape: Vec<f64>,
    pub noise_variance_scale: Vec<f64>,
    /// Exponential prior weight `k_l` on the saliency.
    pub saliency_weight: Vec<f64>,
}

impl FshmmPriors {
    pub fn n_states(&self) -> usize {
        self.initial_concentration.len()
    }

    pub fn n_features(&self) -> usize {
        self.saliency_weight.len()
    }

    pub fn validate(&self, n_states: usize, n_features: usize) -> Result<()> {
        let (k, l) = (n_states, n_features);
        let grid_ok =
            |g: &[Vec<f64>], cols: usize| g.len() == k && g.iter().all(|r| r.len() == cols);
        let shapes_ok = self.initial_concentration.len() == k
            && grid_ok(&self.transition_concentration, k)
            && grid_ok(&self.mean_prior_mean, l)
            && grid_ok(&self.mean_prior_sd, l)
            && grid_ok(&self.variance_shape, l)
            && grid_ok(&self.variance_scale, l)
            && [
                &self.noise_mean_prior_mean,
                &self.noise_mean_prior_sd,
                &self.noise_variance_shape,
                &self.noise_variance_scale,
                &self.saliency_weight,
            ]
            .iter()
            .all(|v| v.len() == l);
        if !shapes_ok {
            return Err(Error::Parameter(format!(
                "prior dimensions do not match {k} states and {l} features"
            )));
        }
        if self
            .initial_concentration
            .iter()
            .chain(self.transition_concentration.iter().flatten())
            .any(|a| !(*a >= 1.0))
        {
            return Err(Error::Parameter(
                "Dirichlet concentrations must be at least 1".into(),
            ));
        }
        let positive = self
            .mean_prior_sd
            .iter()
            .flatten()
            .chain(self.variance_shape.iter().flatten())
            .chain(self.variance_scale.iter().flatten())
            .chain(&self.noise_mean_prior_sd)
            .chain(&self.noise_variance_shape)
            .chain(&self.noise_variance_scale)
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive {
            return Err(Error::Parameter(
                "prior scales and shapes must be positive".into(),
            ));
        }
        if self
            .mean_prior_mean
            .iter()
            .flatten()
            .chain(&self.noise_mean_prior_mean)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Parameter("prior means must be finite".into()));
        }
        if self
            .saliency_weight
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::Parameter(
                "saliency weights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Sets the same saliency weight on every feature.
    pub fn with_saliency_weight(mut self, k: f64) -> Self {
        self.saliency_weight.iter_mut().for_each(|w| *w = k);
        self
    }
}

/// Uninformative Dirichlet priors, data-centred Gaussian and inverse-gamma
/// priors, and `k_l = k_scale * T` for every feature.
pub fn default_priors(panel: &ReturnPanel, n_states: usize, k_scale: f64) -> Result<FshmmPriors> {
    let t = panel.n_rows();
    if t < 8 {
        return Err(Error::InsufficientData(format!(
            "{t} observations, need at least 8"
        )));
    }
    if n_states == 0 {
        return Err(Error::Parameter(
            "number of states must be at least 1".into(),
        ));
    }
    let means = panel.column_means();
    let cov = panel.covariance();
    let var: Vec<f64> = (0..panel.n_cols()).map(|j| cov[j][j]).collect();
    let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    let l = panel.n_cols();
    Ok(FshmmPriors {
        initial_concentration: vec![1.0; n_states],
        transition_concentration: vec![vec![1.0; n_states]; n_states],
        mean_prior_mean: vec![means.clone(); n_states],
        mean_prior_sd: vec![sd.clone(); n_states],
        variance_shape: vec![vec![1.0; l]; n_states],
        variance_scale: vec![var.clone(); n_states],
        noise_mean_prior_mean: means,
        noise_mean_prior_sd: sd,
        noise_variance_shape: vec![1.0; l],
        noise_variance_scale: var,
        saliency_weight: vec![k_scale * t as f64; l],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FshmmConfig {
    /// Stop when the absolute percent change of the log-posterior drops
    /// below this value.
    pub tol: f64,
    pub max_iter: usize,
    pub n_restarts: usize,
    pub seed: u64,
    /// Saliency cut-off recorded in the report's selection.
    pub threshold: f64,
}

impl Default for FshmmConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
            n_restarts: 10,
            seed: 0,
            threshold: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub saliency: Vec<f64>,
    pub selected: Vec<usize>,
    pub threshold: f64,
    pub saliency_weight: Vec<f64>,
    /// Log-posterior of the initial parameters and after every M-step.
    pub trace: Vec<f64>,
    pub n_iterations: usize,
    pub converged: bool,
    pub restart_index: usize,
}

impl SaliencyReport {
    pub fn select(&self, threshold: f64) -> Result<Vec<usize>> {
        select_features(&self.saliency, threshold)
    }

    pub fn log_posterior(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Indices of features with saliency at or above `threshold`, in order.
pub fn select_features(saliency: &[f64], threshold: f64) -> Result<Vec<usize>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Parameter(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    Ok(saliency
        .iter()
        .enumerate()
        .filter(|(_, r)| **r >= threshold)
        .map(|(i, _)| i)
        .collect())
}

/// E-step quantities. The per-feature arrays are indexed `(t * I + i) * L + l`;
/// `e`, `h` and `g` are left empty by the fitting loop.
#[derive(Debug, Clone)]
pub struct EStep {
    pub n_states: usize,
    pub n_features: usize,
    pub posterior: Posterior,
    pub log_emissions: Vec<f64>,
    pub e: Vec<f64>,
    pub h: Vec<f64>,
    pub g: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl EStep {
    pub fn index(&self, t: usize, i: usize, l: usize) -> usize {
        (t * self.n_states + i) * self.n_features + l
    }

    pub fn log_likelihood(&self) -> f64 {
        self.posterior.log_likelihood
    }
}

fn check_dims(model: &FshmmModel, panel: &ReturnPanel) -> Result<()> {
    if model.n_features() != panel.n_cols() {
        return Err(Error::Shape {
            expected: model.n_features(),
            got: panel.n_cols(),
        });
    }
    Ok(())
}

/// Full E-step, including the `e`, `h` and `g` densities.
pub fn e_step(model: &FshmmModel, panel: &ReturnPanel) -> Result<EStep> {
    e_step_impl(model, panel, true)
}

fn e_step_impl(model: &FshmmModel, panel: &ReturnPanel, with_densities: bool) -> Result<EStep> {
    check_dims(model, panel)?;
    let (k, l, t_len) = (model.n_states(), model.n_features(), panel.n_rows());
    let n = t_len * k * l;
    let dense = if with_densities { n } else { 0 };
    let (mut e, mut h, mut g) = (vec![0.0; dense], vec![0.0; dense], vec![0.0; dense]);
    // fraction e / g, later scaled by gamma into u
    let mut u = vec![0.0; n];
    let mut log_b = vec![0.0; t_len * k];

    let ln_rho: Vec<f64> = model.saliency.iter().map(|r| r.ln()).collect();
    let ln_not_rho: Vec<f64> = model.saliency.iter().map(|r| (1.0 - r).ln()).collect();
    let rel_norm: Vec<f64> = (0..k * l)
        .map(|c| ln_rho[c % l] - 0.5 * (LN_2PI + model.variances[c / l][c % l].ln()))
        .collect();
    let rel_prec: Vec<f64> = (0..k * l)
        .map(|c| 0.5 / model.variances[c / l][c % l])
        .collect();
    let noise_norm: Vec<f64> = (0..l)
        .map(|f| ln_not_rho[f] - 0.5 * (LN_2PI + model.noise_variances[f].ln()))
        .collect();

    for (t, row) in panel.rows().enumerate() {
        for f in 0..l {
            let y = row[f];
            let dq = y - model.noise_means[f];
            let lq = noise_norm[f] - dq * dq / (2.0 * model.noise_variances[f]);
            for i in 0..k {
                let c = i * l + f;
                let idx = (t * k + i) * l + f;
                let dr = y - model.means[i][f];
                let le = rel_norm[c] - rel_prec[c] * dr * dr;
                // log g = logaddexp(le, lq); frac = e / g
                let (lg, frac) = if le == f64::NEG_INFINITY && lq == f64::NEG_INFINITY {
                    (f64::NEG_INFINITY, 0.0)
                } else if le >= lq {
                    let x = (lq - le).exp();
                    (le + x.ln_1p(), 1.0 / (1.0 + x))
                } else {
                    let x = (le - lq).exp();
                    (lq + x.ln_1p(), x / (1.0 + x))
                };
                u[idx] = frac;
                log_b[t * k + i] += lg;
                if with_densities {
                    e[idx] = le.exp();
                    h[idx] = lq.exp();
                    g[idx] = e[idx] + h[idx];
                }
            }
        }
    }

    let posterior = inference::forward_backward(
        &log_vec(&model.initial),
        &log_matrix(&model.transition),
        &log_b,
    );
    let mut v = vec![0.0; n];
    for t in 0..t_len {
        for i in 0..k {
            let gamma = posterior.gamma[t * k + i];
            let base = (t * k + i) * l;
            for f in 0..l {
                u[base + f] *= gamma;
                v[base + f] = gamma - u[base + f];
            }
        }
    }
    Ok(EStep {
        n_states: k,
        n_features: l,
        posterior,
        log_emissions: log_b,
        e,
        h,
        g,
        u,
        v,
    })
}

pub fn log_likelihood(model: &FshmmModel, panel: &ReturnPanel) -> Result<f64> {
    Ok(e_step_impl(model, panel, false)?.log_likelihood())
}

/// Log prior density of the parameters, up to an additive constant.
pub fn log_prior(model: &FshmmModel, priors: &FshmmPriors) -> f64 {
    let mut lp = 0.0;
    let dirichlet_term = |alpha: f64, p: f64| {
        if alpha == 1.0 {
            0.0
        } else {
            (alpha - 1.0) * p.ln()
        }
    };
    for (a, p) in priors.initial_concentration.iter().zip(&model.initial) {
        lp += dirichlet_term(*a, *p);
    }
    for (ar, pr) in priors
        .transition_concentration
        .iter()
        .zip(&model.transition)
    {
        for (a, p) in ar.iter().zip(pr) {
            lp += dirichlet_term(*a, *p);
        }
    }
    for i in 0..model.n_states() {
        for f in 0..model.n_features() {
            let d = model.means[i][f] - priors.mean_prior_mean[i][f];
            let s = priors.mean_prior_sd[i][f];
            lp -= d * d / (2.0 * s * s);
            let var = model.variances[i][f];
            lp -=
                (priors.variance_shape[i][f] + 1.0) * var.ln() + priors.variance_scale[i][f] / var;
        }
    }
    for f in 0..model.n_features() {
        let d = model.noise_means[f] - priors.noise_mean_prior_mean[f];
        let c = priors.noise_mean_prior_sd[f];
        lp -= d * d / (2.0 * c * c);
        let tau = model.noise_variances[f];
        lp -= (priors.noise_variance_shape[f] + 1.0) * tau.ln()
            + priors.noise_variance_scale[f] / tau;
        lp -= priors.saliency_weight[f] * model.saliency[f];
    }
    lp
}

pub fn log_posterior(model: &FshmmModel, priors: &FshmmPriors, panel: &ReturnPanel) -> Result<f64> {
    Ok(log_likelihood(model, panel)? + log_prior(model, priors))
}

/// MAP saliency update: the root in `[0, 1]` of
/// `k rho^2 - (N + k) rho + U = 0` where `U = sum_t sum_i u_ilt` and `N` is
/// the number of observations. `k = 0` reduces to `U / N`.
pub fn saliency_update(relevant_mass: f64, n_obs: usize, k: f64) -> f64 {
    let n = n_obs as f64;
    if k <= 1e-12 * n {
        return relevant_mass / n;
    }
    let t_hat = n + k;
    let disc = (t_hat * t_hat - 4.0 * k * relevant_mass).max(0.0);
    (t_hat - disc.sqrt()) / (2.0 * k)
}

/// MAP M-step. Means are updated with the previous variances, then
/// variances with the new means.
pub fn m_step(
    panel: &ReturnPanel,
    es: &EStep,
    priors: &FshmmPriors,
    prev: &FshmmModel,
) -> FshmmModel {
    let (k, l, t_len) = (prev.n_states(), prev.n_features(), panel.n_rows());
    let post = &es.posterior;

    let pi_raw: Vec<f64> = (0..k)
        .map(|i| post.gamma[i] + priors.initial_concentration[i] - 1.0)
        .collect();
    let pi_norm: f64 = pi_raw.iter().sum();
    let initial = pi_raw.iter().map(|v| v / pi_norm).collect();

    let transition = (0..k)
        .map(|i| {
            let raw: Vec<f64> = (0..k)
                .map(|j| post.xi_sum[i * k + j] + priors.transition_concentration[i][j] - 1.0)
                .collect();
            let s: f64 = raw.iter().sum();
            if s > 0.0 {
                raw.iter().map(|v| v / s).collect()
            } else {
                prev.transition[i].clone()
            }
        })
        .collect();

    // sufficient statistics
    let mut su = vec![0.0; k * l];
    let mut suy = vec![0.0; k * l];
    let mut sv = vec![0.0; l];
    let mut svy = vec![0.0; l];
    for (t, row) in panel.rows().enumerate() {
        for i in 0..k {
            for f in 0..l {
                let idx = (t * k + i) * l + f;
                su[i * l + f] += es.u[idx];
                suy[i * l + f] += es.u[idx] * row[f];
                sv[f] += es.v[idx];
                svy[f] += es.v[idx] * row[f];
            }
        }
    }

    let mut means = prev.means.clone();
    let mut variances = prev.variances.clone();
    for i in 0..k {
        for f in 0..l {
            let s2 = priors.mean_prior_sd[i][f].powi(2);
            let var_old = prev.variances[i][f];
            means[i][f] = (s2 * suy[i * l + f] + var_old * priors.mean_prior_mean[i][f])
                / (s2 * su[i * l + f] + var_old);
        }
    }
    let mut noise_means = prev.noise_means.clone();
    for f in 0..l {
        let c2 = priors.noise_mean_prior_sd[f].powi(2);
        let tau_old = prev.noise_variances[f];
        noise_means[f] =
            (c2 * svy[f] + tau_old * priors.noise_mean_prior_mean[f]) / (c2 * sv[f] + tau_old);
    }

    let mut sud = vec![0.0; k * l];
    let mut svd = vec![0.0; l];
    for (t, row) in panel.rows().enumerate() {
        for i in 0..k {
            for f in 0..l {
                let idx = (t * k + i) * l + f;
                sud[i * l + f] += es.u[idx] * (row[f] - means[i][f]).powi(2);
                svd[f] += es.v[idx] * (row[f] - noise_means[f]).powi(2);
            }
        }
    }
    for i in 0..k {
        for f in 0..l {
            variances[i][f] = (sud[i * l + f] + 2.0 * priors.variance_scale[i][f])
                / (su[i * l + f] + 2.0 * (priors.variance_shape[i][f] + 1.0));
        }
    }
    let noise_variances = (0..l)
        .map(|f| {
            (svd[f] + 2.0 * priors.noise_variance_scale[f])
                / (sv[f] + 2.0 * (priors.noise_variance_shape[f] + 1.0))
        })
        .collect();

    let saliency = (0..l)
        .map(|f| {
            let mass: f64 = (0..k).map(|i| su[i * l + f]).sum();
            saliency_update(mass, t_len, priors.saliency_weight[f])
        })
        .collect();

    FshmmModel {
        initial,
        transition,
        means,
        variances,
        saliency,
        noise_means,
        noise_variances,
    }
}

fn clamp_saliency(model: &mut FshmmModel) {
    model
        .saliency
        .iter_mut()
        .for_each(|r| *r = r.clamp(RHO_FLOOR, 1.0 - RHO_FLOOR));
}

fn initial_model(panel: &ReturnPanel, k: usize, rng: &mut impl Rng) -> FshmmModel {
    let l = panel.n_cols();
    let mean = panel.column_means();
    let cov = panel.covariance();
    let var: Vec<f64> = (0..l).map(|j| cov[j][j]).collect();
    let rows = sample_indices(rng, panel.n_rows(), k);
    let means = rows
        .iter()
        .map(|t| {
            (0..l)
                .map(|f| {
                    let e: f64 = rng.sample(StandardNormal);
                    panel.value(t, f) + 0.01 * var[f].sqrt() * e
                })
                .collect()
        })
        .collect();
    FshmmModel {
        initial: dirichlet(rng, k, 10.0),
        transition: (0..k).map(|_| dirichlet(rng, k, 10.0)).collect(),
        means,
        variances: vec![var.clone(); k],
        saliency: vec![0.5; l],
        noise_means: mean,
        noise_variances: var,
    }
}

/// Runs MAP EM from `init` until the percent change of the log-posterior
/// drops below `config.tol` or `config.max_iter` M-steps were taken.
pub fn fit_fshmm_from(
    panel: &ReturnPanel,
    init: &FshmmModel,
    priors: &FshmmPriors,
    config: &FshmmConfig,
) -> Result<(FshmmModel, SaliencyReport)> {
    init.validate()?;
    check_dims(init, panel)?;
    priors.validate(init.n_states(), init.n_features())?;
    run(panel, init.clone(), priors, config, 0)
}

fn run(
    panel: &ReturnPanel,
    init: FshmmModel,
    priors: &FshmmPriors,
    config: &FshmmConfig,
    restart: usize,
) -> Result<(FshmmModel, SaliencyReport)> {
    let mut model = init;
    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let es = e_step_impl(&model, panel, false)?;
        let objective = es.log_likelihood() + log_prior(&model, priors);
        if !objective.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite log-posterior at iteration {iterations}"
            )));
        }
        if let Some(&prev) = trace.last() {
            let pct = 100.0 * ((objective - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs();
            if pct < config.tol {
                converged = true;
            }
        }
        trace.push(objective);
        if converged || iterations >= config.max_iter {
            break;
        }
        model = m_step(panel, &es, priors, &model);
        clamp_saliency(&mut model);
        iterations += 1;
    }
    let selected = select_features(&model.saliency, config.threshold)?;
    let report = SaliencyReport {
        saliency: model.saliency.clone(),
        selected,
        threshold: config.threshold,
        saliency_weight: priors.saliency_weight.clone(),
        trace,
        n_iterations: iterations.max(1),
        converged,
        restart_index: restart,
    };
    Ok((model, report))
}

/// MAP EM with random restarts; the restart with the highest final
/// log-posterior is returned (ties to the lowest restart index).
pub fn fit_fshmm_map(
    panel: &ReturnPanel,
    n_states: usize,
    priors: &FshmmPriors,
    config: &FshmmConfig,
) -> Result<(FshmmModel, SaliencyReport)> {
    if n_states == 0 {
        return Err(Error::Parameter(
            "number of states must be at least 1".into(),
        ));
    }
    if panel.n_rows() <= n_states {
        return Err(Error::InsufficientData(format!(
            "{} observations for {n_states} states",
            panel.n_rows()
        )));
    }
    priors.validate(n_states, panel.n_cols())?;
    select_features(&[], config.threshold)?;
    let restarts = config.n_restarts.max(1);
    let results: Vec<_> = (0..restarts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(restart_seed(config.seed, r));
            let mut init = initial_model(panel, n_states, &mut rng);
            clamp_saliency(&mut init);
            run(panel, init, priors, config, r)
        })
        .collect();
    let mut best: Option<(FshmmModel, SaliencyReport)> = None;
    let mut last_err = None;
    for res in results {
        match res {
            Ok((m, rep)) => {
                if best
                    .as_ref()
                    .is_none_or(|(_, b)| rep.log_posterior() > b.log_posterior())
                {
                    best = Some((m, rep));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| {
        Error::Numerical(format!(
            "all {restarts} restarts failed; last error: {}",
            last_err.map_or_else(|| "none".into(), |e| e.to_string())
        ))
    })
}

/// JSON document bundling a fitted model, its priors and saliency report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FshmmDocument {
    pub n_states: usize,
    pub n_features: usize,
    #[serde(default)]
    pub features: Vec<String>,
    pub model: FshmmModel,
    pub priors: FshmmPriors,
    pub report: SaliencyReport,
}

impl FshmmDocument {
    pub fn new(
        model: FshmmModel,
        priors: FshmmPriors,
        report: SaliencyReport,
        features: Vec<String>,
    ) -> Self {
        Self {
            n_states: model.n_states(),
            n_features: model.n_features(),
            features,
            model,
            priors,
            report,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        doc.model.validate()?;
        Ok(doc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{business_days, default_start_date};

    fn panel(rows: Vec<Vec<f64>>) -> ReturnPanel {
        let l = rows[0].len();
        ReturnPanel::from_rows(
            business_days(default_start_date(), rows.len()),
            (0..l).map(|i| format!("f{i}")).collect(),
            rows,
        )
        .unwrap()
    }

    fn toy_panel() -> ReturnPanel {
        panel(
            (0..40)
                .map(|t| vec![((t * 7) % 5) as f64 - 2.0, ((t * 3) % 7) as f64 * 0.5])
                .collect(),
        )
    }

    #[test]
    fn default_k_scales_with_length() {
        let rows = (0..3800).map(|t| vec![(t % 13) as f64]).collect();
        let p = default_priors(&panel(rows), 2, 0.25).unwrap();
        assert_eq!(p.saliency_weight, vec![950.0]);
        let rows = (0..2000)
            .map(|t| vec![(t % 13) as f64, (t % 7) as f64])
            .collect();
        let p = default_priors(&panel(rows), 2, 0.025).unwrap();
        assert!(p.saliency_weight.iter().all(|k| (k - 50.0).abs() < 1e-9));
        assert!(p.initial_concentration.iter().all(|b| *b == 1.0));
    }

    #[test]
    fn default_priors_need_eight_rows() {
        let rows = (0..7).map(|t| vec![t as f64]).collect();
        assert!(matches!(
            default_priors(&panel(rows), 2, 0.25),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn selection_by_threshold() {
        assert_eq!(
            select_features(&[0.99, 0.02, 0.95], 0.5).unwrap(),
            vec![0, 2]
        );
        assert!(select_features(&[0.1, 0.2], 0.5).unwrap().is_empty());
        let table = [0.986, 0.986, 0.190, 0.994, 0.995, 0.017, 0.007, 0.018];
        assert_eq!(select_features(&table, 0.9).unwrap(), vec![0, 1, 3, 4]);
        assert!(select_features(&table, 0.0).is_err());
        assert!(select_features(&table, 1.0).is_err());
    }

    #[test]
    fn saliency_root_and_limit() {
        // k -> 0 collapses to the maximum-likelihood fraction
        assert!((saliency_update(30.0, 40, 0.0) - 0.75).abs() < 1e-15);
        let near = saliency_update(30.0, 40, 1e-6);
        assert!((near - 0.75).abs() < 1e-6);
        // the root satisfies the stationarity condition
        let (u, n, k) = (1500.0, 2000, 50.0);
        let rho = saliency_update(u, n, k);
        let resid = k * rho * rho - (n as f64 + k) * rho + u;
        assert!(resid.abs() < 1e-8);
        assert!((0.0..=1.0).contains(&rho));
        // full relevance mass and a heavy prior stays in range
        let rho = saliency_update(2000.0, 2000, 1e6);
        assert!((0.0..=1.0).contains(&rho));
    }

    #[test]
    fn uninformative_dirichlet_gives_ml_transitions() {
        let p = toy_panel();
        let priors = default_priors(&p, 2, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = initial_model(&p, 2, &mut rng);
        let es = e_step(&model, &p).unwrap();
        let next = m_step(&p, &es, &priors, &model);
        for i in 0..2 {
            let row = &es.posterior.xi_sum[i * 2..i * 2 + 2];
            let s: f64 = row.iter().sum();
            for j in 0..2 {
                assert!((next.transition[i][j] - row[j] / s).abs() < 1e-14);
            }
            assert!((next.initial[i] - es.posterior.gamma[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn e_step_identities() {
        let p = toy_panel();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = initial_model(&p, 3, &mut rng);
        let es = e_step(&model, &p).unwrap();
        for t in 0..p.n_rows() {
            for i in 0..3 {
                for f in 0..2 {
                    let idx = es.index(t, i, f);
                    assert_eq!(es.g[idx], es.e[idx] + es.h[idx]);
                    let gamma = es.posterior.gamma[t * 3 + i];
                    assert!((es.u[idx] + es.v[idx] - gamma).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_priors() {
        let p = toy_panel();
        let mut priors = default_priors(&p, 2, 0.25).unwrap();
        priors.variance_scale[0][0] = 0.0;
        assert!(matches!(
            fit_fshmm_map(&p, 2, &priors, &FshmmConfig::default()),
            Err(Error::Parameter(_))
        ));
        let mut priors = default_priors(&p, 2, 0.25).unwrap();
        priors.saliency_weight[1] = -1.0;
        assert!(matches!(
            fit_fshmm_map(&p, 2, &priors, &FshmmConfig::default()),
            Err(Error::Parameter(_))
        ));
        let mut priors = default_priors(&p, 2, 0.25).unwrap();
        priors.initial_concentration[0] = 0.5;
        assert!(matches!(
            fit_fshmm_map(&p, 2, &priors, &FshmmConfig::default()),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn document_round_trip() {
        let p = toy_panel();
        let priors = default_priors(&p, 2, 0.25).unwrap();
        let config = FshmmConfig {
            n_restarts: 2,
            max_iter: 20,
            ..FshmmConfig::default()
        };
        let (model, report) = fit_fshmm_map(&p, 2, &priors, &config).unwrap();
        let doc = FshmmDocument::new(model, priors, report, p.assets().to_vec());
        let back = FshmmDocument::from_json(&doc.to_json().unwrap()).unwrap();
        assert_eq!(back, doc);
    }
}
