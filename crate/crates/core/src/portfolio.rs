//! Long-only portfolio construction from regime moments.
//!
//! Smooth objectives are solved by multi-start projected gradient on the
//! simplex followed by an active-set polish on the detected support. Risk
//! parity uses Newton's method on the log-barrier formulation whose
//! stationary point equalises risk contributions.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_WEIGHT: f64 = 0.8;
const SNAP: f64 = 1e-10;
const N_STARTS: usize = 10;
// the active-set polish finishes the job once the support is identified
const PG_TOL: f64 = 1e-10;
const MAX_PG_ITER: usize = 3000;

/// Expected daily returns and their covariance for one regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeMoments {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl RegimeMoments {
    pub fn new(mean: Vec<f64>, covariance: Vec<Vec<f64>>) -> Result<Self> {
        let m = Self { mean, covariance };
        m.validate()?;
        Ok(m)
    }

    pub fn n_assets(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.n_assets();
        if l == 0 {
            return Err(Error::Parameter("no assets".into()));
        }
        if self.covariance.len() != l || self.covariance.iter().any(|r| r.len() != l) {
            return Err(Error::Shape {
                expected: l,
                got: self.covariance.len(),
            });
        }
        if self
            .mean
            .iter()
            .chain(self.covariance.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Parameter("moments contain non-finite values".into()));
        }
        let scale = (0..l)
            .map(|j| self.covariance[j][j].abs())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        for a in 0..l {
            for b in 0..a {
                if (self.covariance[a][b] - self.covariance[b][a]).abs() > 1e-12 * scale {
                    return Err(Error::Parameter("covariance is not symmetric".into()));
                }
            }
        }
        let eig = SymmetricEigen::new(self.matrix());
        if eig.eigenvalues.iter().any(|&v| v < -1e-10 * scale) {
            return Err(Error::Parameter(
                "covariance is not positive semi-definite".into(),
            ));
        }
        Ok(())
    }

    fn matrix(&self) -> DMatrix<f64> {
        let l = self.n_assets();
        DMatrix::from_fn(l, l, |a, b| self.covariance[a][b])
    }

    /// Covariance with `1e-10 * trace / L` added to the diagonal.
    pub fn regularized_covariance(&self) -> DMatrix<f64> {
        let l = self.n_assets();
        let mut m = self.matrix();
        let ridge = 1e-10 * m.trace() / l as f64;
        for j in 0..l {
            m[(j, j)] += ridge;
        }
        m
    }

    pub fn volatilities(&self) -> Vec<f64> {
        (0..self.n_assets())
            .map(|j| self.covariance[j][j].max(0.0).sqrt())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortfolioMethod {
    MaxReturn,
    Dyn,
    Sharpe,
    RiskParity,
    MaxDiversification,
    MinVariance,
    EqualWeight,
}

impl PortfolioMethod {
    pub const ALL: [PortfolioMethod; 7] = [
        PortfolioMethod::MaxReturn,
        PortfolioMethod::Dyn,
        PortfolioMethod::Sharpe,
        PortfolioMethod::RiskParity,
        PortfolioMethod::MaxDiversification,
        PortfolioMethod::MinVariance,
        PortfolioMethod::EqualWeight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PortfolioMethod::MaxReturn => "max_return",
            PortfolioMethod::Dyn => "dyn",
            PortfolioMethod::Sharpe => "sharpe",
            PortfolioMethod::RiskParity => "risk_parity",
            PortfolioMethod::MaxDiversification => "max_diversification",
            PortfolioMethod::MinVariance => "min_variance",
            PortfolioMethod::EqualWeight => "equal_weight",
        }
    }
}

impl fmt::Display for PortfolioMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PortfolioMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        PortfolioMethod::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::Parameter(format!("unknown portfolio method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioWeights {
    pub weights: Vec<f64>,
    pub method: PortfolioMethod,
    /// Set when max Sharpe found no positive expected return and returned
    /// the minimum-variance portfolio instead.
    #[serde(default)]
    pub min_variance_fallback: bool,
}

impl PortfolioWeights {
    fn new(weights: Vec<f64>, method: PortfolioMethod) -> Self {
        Self {
            weights: snap(weights),
            method,
            min_variance_fallback: false,
        }
    }
}

/// Zeroes entries below `1e-10` (and any negatives) and renormalises.
fn snap(mut w: Vec<f64>) -> Vec<f64> {
    w.iter_mut().for_each(|v| {
        if *v < SNAP {
            *v = 0.0
        }
    });
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Builds the portfolio for `method`; `max_weight` only affects max return.
pub fn construct(
    method: PortfolioMethod,
    moments: &RegimeMoments,
    max_weight: f64,
) -> Result<PortfolioWeights> {
    match method {
        PortfolioMethod::MaxReturn => max_return(moments, max_weight),
        PortfolioMethod::Dyn => dynamic(moments),
        PortfolioMethod::Sharpe => max_sharpe(moments),
        PortfolioMethod::RiskParity => risk_parity(moments),
        PortfolioMethod::MaxDiversification => max_diversification(moments),
        PortfolioMethod::MinVariance => min_variance(moments),
        PortfolioMethod::EqualWeight => equal_weight(moments.n_assets()),
    }
}

pub fn equal_weight(n_assets: usize) -> Result<PortfolioWeights> {
    if n_assets == 0 {
        return Err(Error::Parameter(
            "equal weight needs at least one asset".into(),
        ));
    }
    let w = vec![1.0 / n_assets as f64; n_assets];
    Ok(PortfolioWeights::new(w, PortfolioMethod::EqualWeight))
}

/// Greedy fill: the highest-mean assets get `cap` each until the budget is
/// spent. Ties go to the lower index.
pub fn max_return(moments: &RegimeMoments, cap: f64) -> Result<PortfolioWeights> {
    let l = moments.n_assets();
    if !(cap > 0.0 && cap <= 1.0) || cap * (l as f64) < 1.0 - 1e-12 {
        return Err(Error::Parameter(format!(
            "weight cap {cap} infeasible for {l} assets"
        )));
    }
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| moments.mean[b].total_cmp(&moments.mean[a]).then(a.cmp(&b)));
    let mut w = vec![0.0; l];
    let mut left = 1.0;
    for j in order {
        let x = cap.min(left);
        w[j] = x;
        left -= x;
        if left <= 0.0 {
            break;
        }
    }
    Ok(PortfolioWeights::new(w, PortfolioMethod::MaxReturn))
}

/// Weights proportional to the means when all are positive, otherwise equal.
pub fn dynamic(moments: &RegimeMoments) -> Result<PortfolioWeights> {
    let l = moments.n_assets();
    if l == 0 {
        return Err(Error::Parameter("no assets".into()));
    }
    let w = if moments.mean.iter().all(|m| *m > 0.0) {
        let s: f64 = moments.mean.iter().sum();
        moments.mean.iter().map(|m| m / s).collect()
    } else {
        vec![1.0 / l as f64; l]
    };
    Ok(PortfolioWeights::new(w, PortfolioMethod::Dyn))
}

pub fn min_variance(moments: &RegimeMoments) -> Result<PortfolioWeights> {
    moments.validate()?;
    let v = normalized(&moments.regularized_covariance())?;
    let w = solve_min_variance(&v);
    Ok(PortfolioWeights::new(w, PortfolioMethod::MinVariance))
}

/// Maximises `w.mu / sqrt(w'Vw)`. With no positive expected return the
/// minimum-variance portfolio is returned and flagged.
pub fn max_sharpe(moments: &RegimeMoments) -> Result<PortfolioWeights> {
    moments.validate()?;
    let v = normalized(&moments.regularized_covariance())?;
    if moments.mean.iter().all(|m| *m <= 0.0) {
        let mut out = PortfolioWeights::new(solve_min_variance(&v), PortfolioMethod::Sharpe);
        out.min_variance_fallback = true;
        return Ok(out);
    }
    let scale = moments.mean.iter().fold(0.0_f64, |a, m| a.max(m.abs()));
    let mu = DVector::from_iterator(moments.n_assets(), moments.mean.iter().map(|m| m / scale));
    let w = solve_max_ratio(&mu, &v);
    Ok(PortfolioWeights::new(w, PortfolioMethod::Sharpe))
}

/// Maximises the diversification ratio `w.sigma / sqrt(w'Vw)`.
pub fn max_diversification(moments: &RegimeMoments) -> Result<PortfolioWeights> {
    moments.validate()?;
    let raw = moments.regularized_covariance();
    let v = normalized(&raw)?;
    let sigma = DVector::from_iterator(
        moments.n_assets(),
        (0..moments.n_assets()).map(|j| v[(j, j)].sqrt()),
    );
    let w = solve_max_ratio(&sigma, &v);
    Ok(PortfolioWeights::new(
        w,
        PortfolioMethod::MaxDiversification,
    ))
}

/// Equal risk contributions `w_j (Vw)_j`.
pub fn risk_parity(moments: &RegimeMoments) -> Result<PortfolioWeights> {
    moments.validate()?;
    let v = normalized(&moments.regularized_covariance())?;
    let w = solve_risk_parity(&v)?;
    Ok(PortfolioWeights::new(w, PortfolioMethod::RiskParity))
}

/// Scales `V` to unit average variance and checks positive definiteness.
fn normalized(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let l = v.nrows();
    let s = v.trace() / l as f64;
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Numerical("covariance has zero trace".into()));
    }
    let out = v / s;
    if out.clone().cholesky().is_none() {
        return Err(Error::Numerical(
            "covariance is singular after regularisation".into(),
        ));
    }
    Ok(out)
}

/// Euclidean projection onto `{w >= 0, sum w = 1}`.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, x) in u.iter().enumerate() {
        css += x;
        let t = (css - 1.0) / (i + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - theta).max(0.0)).collect()
}

fn start_points(l: usize) -> Vec<Vec<f64>> {
    let mut starts = vec![vec![1.0 / l as f64; l]];
    for j in 0..l.min(N_STARTS / 2) {
        let mut w = vec![0.5 / (l as f64 - 1.0).max(1.0); l];
        w[j] = if l == 1 { 1.0 } else { 0.5 };
        starts.push(w);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    while starts.len() < N_STARTS {
        let draws: Vec<f64> = (0..l).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let s: f64 = draws.iter().sum();
        starts.push(draws.iter().map(|d| d / s).collect());
    }
    starts
}

/// Minimises `f` over the simplex by projected gradient with Armijo
/// backtracking along the projection arc.
fn projected_gradient<F, G>(f: F, grad: G, x0: Vec<f64>) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    let mut x = project_simplex(&x0);
    let mut fx = f(&x);
    let mut step = 1.0;
    for _ in 0..MAX_PG_ITER {
        let g = grad(&x);
        let unit: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - b).collect();
        let pg = project_simplex(&unit);
        let stationarity = pg
            .iter()
            .zip(&x)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if stationarity < PG_TOL {
            break;
        }
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
            let cand = project_simplex(&trial);
            let decrease: f64 = g
                .iter()
                .zip(cand.iter().zip(&x))
                .map(|(gi, (c, xi))| gi * (c - xi))
                .sum();
            let fc = f(&cand);
            if fc <= fx + 1e-4 * decrease {
                x = cand;
                fx = fc;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        step = (step * 2.0).min(1e6);
    }
    x
}

fn quad(v: &DMatrix<f64>, w: &[f64]) -> f64 {
    let wv = DVector::from_column_slice(w);
    (wv.transpose() * v * &wv)[(0, 0)]
}

fn mat_vec(v: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    (v * DVector::from_column_slice(w))
        .iter()
        .copied()
        .collect()
}

fn solve_min_variance(v: &DMatrix<f64>) -> Vec<f64> {
    let l = v.nrows();
    let f = |w: &[f64]| quad(v, w);
    let grad = |w: &[f64]| {
        mat_vec(v, w)
            .into_iter()
            .map(|x| 2.0 * x)
            .collect::<Vec<_>>()
    };
    let mut best = project_simplex(&vec![1.0 / l as f64; l]);
    let mut best_f = f(&best);
    for s in start_points(l) {
        let x = projected_gradient(f, grad, s);
        let fx = f(&x);
        if fx < best_f {
            best = x;
            best_f = fx;
        }
    }
    if let Some(p) = active_set(
        v,
        &DVector::from_element(l, 1.0),
        &best,
        Target::MinVariance,
    ) {
        if f(&p) <= best_f * (1.0 + 1e-12) {
            best = p;
        }
    }
    best
}

fn ratio(a: &DVector<f64>, v: &DMatrix<f64>, w: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(w).map(|(x, y)| x * y).sum();
    num / quad(v, w).sqrt()
}

fn ratio_gradient(a: &DVector<f64>, v: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    let vw = mat_vec(v, w);
    let var: f64 = vw.iter().zip(w).map(|(x, y)| x * y).sum();
    let s = var.sqrt();
    let num: f64 = a.iter().zip(w).map(|(x, y)| x * y).sum();
    a.iter()
        .zip(&vw)
        .map(|(ai, vi)| ai / s - num * vi / (s * var))
        .collect()
}

fn solve_max_ratio(a: &DVector<f64>, v: &DMatrix<f64>) -> Vec<f64> {
    let l = v.nrows();
    let f = |w: &[f64]| -ratio(a, v, w);
    let grad = |w: &[f64]| {
        ratio_gradient(a, v, w)
            .into_iter()
            .map(|g| -g)
            .collect::<Vec<_>>()
    };
    let mut best = vec![1.0 / l as f64; l];
    let mut best_f = f(&best);
    for s in start_points(l) {
        let x = projected_gradient(f, grad, s);
        let fx = f(&x);
        if fx < best_f {
            best = x;
            best_f = fx;
        }
    }
    if best_f < 0.0 {
        if let Some(p) = active_set(v, a, &best, Target::MaxRatio) {
            if f(&p) <= best_f + 1e-14 * best_f.abs() {
                best = p;
            }
        }
    }
    best
}

#[derive(Clone, Copy, PartialEq)]
enum Target {
    MinVariance,
    MaxRatio,
}

/// Active-set refinement. On a support `S` both problems have the closed
/// form `w_S ∝ V_SS^{-1} a_S` (`a = 1` for minimum variance). Negative
/// components leave the support; KKT violators outside it join.
fn active_set(
    v: &DMatrix<f64>,
    a: &DVector<f64>,
    start: &[f64],
    target: Target,
) -> Option<Vec<f64>> {
    let l = v.nrows();
    let mut support: Vec<bool> = start.iter().map(|w| *w > 1e-9).collect();
    for _ in 0..(4 * l + 4) {
        let idx: Vec<usize> = (0..l).filter(|&j| support[j]).collect();
        if idx.is_empty() {
            return None;
        }
        let sub = DMatrix::from_fn(idx.len(), idx.len(), |r, c| v[(idx[r], idx[c])]);
        let rhs = DVector::from_iterator(idx.len(), idx.iter().map(|&j| a[j]));
        let x = sub.cholesky()?.solve(&rhs);
        let total: f64 = x.iter().sum();
        if !(total.abs() > 1e-300) {
            return None;
        }
        let mut w = vec![0.0; l];
        for (k, &j) in idx.iter().enumerate() {
            w[j] = x[k] / total;
        }
        if let Some(neg) = idx
            .iter()
            .copied()
            .filter(|&j| w[j] <= 0.0)
            .min_by(|&p, &q| w[p].total_cmp(&w[q]))
        {
            support[neg] = false;
            continue;
        }
        // KKT for the excluded assets
        let grad: Vec<f64> = match target {
            Target::MinVariance => {
                let vw = mat_vec(v, &w);
                let lambda: f64 = vw.iter().zip(&w).map(|(p, q)| p * q).sum();
                vw.iter().map(|g| lambda - g).collect()
            }
            Target::MaxRatio => ratio_gradient(a, v, &w),
        };
        let worst = (0..l)
            .filter(|&j| !support[j])
            .max_by(|&p, &q| grad[p].total_cmp(&grad[q]));
        match worst {
            Some(j) if grad[j] > 1e-12 => support[j] = true,
            _ => return Some(w),
        }
    }
    None
}

/// Newton's method on `0.5 y'Vy - (1/L) sum ln y_j`; its minimiser has
/// `y_j (Vy)_j = 1/L` for every asset.
fn solve_risk_parity(v: &DMatrix<f64>) -> Result<Vec<f64>> {
    let l = v.nrows();
    let b = 1.0 / l as f64;
    let objective = |y: &DVector<f64>| {
        0.5 * (y.transpose() * v * y)[(0, 0)] - b * y.iter().map(|x| x.ln()).sum::<f64>()
    };
    let mut y = DVector::from_iterator(l, (0..l).map(|j| 1.0 / v[(j, j)].sqrt()));
    y /= (y.transpose() * v * &y)[(0, 0)].sqrt();
    let mut fy = objective(&y);
    for _ in 0..200 {
        let vy = v * &y;
        let grad = DVector::from_iterator(l, (0..l).map(|j| vy[j] - b / y[j]));
        if grad.amax() < 1e-15 {
            break;
        }
        let mut hess = v.clone();
        for j in 0..l {
            hess[(j, j)] += b / (y[j] * y[j]);
        }
        let dir = -hess
            .cholesky()
            .ok_or_else(|| Error::Numerical("risk parity Hessian is not positive definite".into()))?
            .solve(&grad);
        let mut t = 1.0;
        while (0..l).any(|j| y[j] + t * dir[j] <= 0.0) {
            t *= 0.5;
        }
        let mut moved = false;
        for _ in 0..60 {
            let cand = &y + t * &dir;
            let fc = objective(&cand);
            if fc <= fy + 1e-4 * t * grad.dot(&dir) || (fc - fy).abs() <= 1e-15 * fy.abs() {
                y = cand;
                fy = fc;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let s: f64 = y.iter().sum();
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::Numerical("risk parity iteration diverged".into()));
    }
    Ok(y.iter().map(|x| x / s).collect())
}

/// Risk contributions `w_j (Vw)_j`, summing to `w'Vw`.
pub fn risk_contributions(covariance: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    w.iter()
        .enumerate()
        .map(|(j, wj)| wj * covariance[j].iter().zip(w).map(|(c, x)| c * x).sum::<f64>())
        .collect()
}

pub fn portfolio_variance(covariance: &[Vec<f64>], w: &[f64]) -> f64 {
    risk_contributions(covariance, w).iter().sum()
}

pub fn sharpe_ratio(moments: &RegimeMoments, w: &[f64]) -> f64 {
    let ret: f64 = moments.mean.iter().zip(w).map(|(m, x)| m * x).sum();
    ret / portfolio_variance(&moments.covariance, w).sqrt()
}

pub fn diversification_ratio(moments: &RegimeMoments, w: &[f64]) -> f64 {
    let num: f64 = moments
        .volatilities()
        .iter()
        .zip(w)
        .map(|(s, x)| s * x)
        .sum();
    num / portfolio_variance(&moments.covariance, w).sqrt()
}

/// Dispersion of risk contributions around their mean: zero at parity.
pub fn risk_parity_dispersion(covariance: &[Vec<f64>], w: &[f64]) -> f64 {
    let rc = risk_contributions(covariance, w);
    let mean = rc.iter().sum::<f64>() / rc.len() as f64;
    rc.iter().map(|r| (r - mean).powi(2)).sum()
}

/// Objectives the lattice oracle can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    MaxReturn { cap: f64 },
    Sharpe,
    MaxDiversification,
    MinVariance,
    RiskParity,
}

impl Objective {
    pub fn maximize(self) -> bool {
        matches!(
            self,
            Objective::MaxReturn { .. } | Objective::Sharpe | Objective::MaxDiversification
        )
    }

    pub fn evaluate(self, moments: &RegimeMoments, w: &[f64]) -> f64 {
        match self {
            Objective::MaxReturn { .. } => moments.mean.iter().zip(w).map(|(m, x)| m * x).sum(),
            Objective::Sharpe => sharpe_ratio(moments, w),
            Objective::MaxDiversification => diversification_ratio(moments, w),
            Objective::MinVariance => portfolio_variance(&moments.covariance, w),
            Objective::RiskParity => risk_parity_dispersion(&moments.covariance, w),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub weights: Vec<f64>,
    pub value: f64,
    pub n_evaluated: usize,
}

pub const GRID_MAX_ASSETS: usize = 5;

/// Exhaustive search over the simplex lattice with spacing `resolution`.
pub fn grid_oracle(
    moments: &RegimeMoments,
    objective: Objective,
    resolution: f64,
) -> Result<GridPoint> {
    let l = moments.n_assets();
    if l == 0 || l > GRID_MAX_ASSETS {
        return Err(Error::Parameter(format!(
            "grid oracle supports 1..={GRID_MAX_ASSETS} assets, got {l}"
        )));
    }
    let steps = (1.0 / resolution).round();
    if !(resolution > 0.0) || (steps * resolution - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "resolution {resolution} does not divide 1"
        )));
    }
    let n = steps as usize;
    let cap = match objective {
        Objective::MaxReturn { cap } => cap,
        _ => 1.0,
    };
    let mut counts = vec![0usize; l];
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut evaluated = 0;
    lattice(&mut counts, 0, n, &mut |c: &[usize]| {
        let w: Vec<f64> = c.iter().map(|&k| k as f64 / n as f64).collect();
        if w.iter().any(|x| *x > cap + 1e-12) {
            return;
        }
        evaluated += 1;
        let value = objective.evaluate(moments, &w);
        if !value.is_finite() {
            return;
        }
        let better = match &best {
            None => true,
            Some((_, b)) if objective.maximize() => value > *b,
            Some((_, b)) => value < *b,
        };
        if better {
            best = Some((w, value));
        }
    });
    let (weights, value) =
        best.ok_or_else(|| Error::Parameter("no feasible lattice point".into()))?;
    Ok(GridPoint {
        weights,
        value,
        n_evaluated: evaluated,
    })
}

fn lattice(counts: &mut [usize], pos: usize, left: usize, visit: &mut dyn FnMut(&[usize])) {
    if pos == counts.len() - 1 {
        counts[pos] = left;
        visit(counts);
        return;
    }
    for k in 0..=left {
        counts[pos] = k;
        lattice(counts, pos + 1, left - k, visit);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(v: &[f64]) -> Vec<Vec<f64>> {
        (0..v.len())
            .map(|a| {
                (0..v.len())
                    .map(|b| if a == b { v[a] } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    fn moments(mean: &[f64], cov: Vec<Vec<f64>>) -> RegimeMoments {
        RegimeMoments::new(mean.to_vec(), cov).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn max_return_greedy_fill() {
        let m = moments(&[0.03, 0.01, 0.02], diag(&[1.0, 1.0, 1.0]));
        assert!(close(
            &max_return(&m, 0.8).unwrap().weights,
            &[0.8, 0.0, 0.2],
            1e-15
        ));
        let eq = moments(&[0.01, 0.01, 0.01], diag(&[1.0, 1.0, 1.0]));
        assert!(close(
            &max_return(&eq, 0.8).unwrap().weights,
            &[0.8, 0.2, 0.0],
            1e-15
        ));
        assert!(matches!(max_return(&eq, 0.3), Err(Error::Parameter(_))));
    }

    #[test]
    fn dyn_rules() {
        let m = moments(&[0.01, 0.03], diag(&[1.0, 1.0]));
        assert!(close(&dynamic(&m).unwrap().weights, &[0.25, 0.75], 1e-15));
        let m = moments(&[0.01, -0.001, 0.02], diag(&[1.0, 1.0, 1.0]));
        assert!(close(&dynamic(&m).unwrap().weights, &[1.0 / 3.0; 3], 1e-15));
        let m = moments(&[0.02; 4], diag(&[1.0; 4]));
        assert!(close(&dynamic(&m).unwrap().weights, &[0.25; 4], 1e-15));
    }

    #[test]
    fn equal_weight_cases() {
        assert_eq!(equal_weight(5).unwrap().weights, vec![0.2; 5]);
        assert_eq!(equal_weight(1).unwrap().weights, vec![1.0]);
        let w = equal_weight(6).unwrap().weights;
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(equal_weight(0).is_err());
    }

    #[test]
    fn sharpe_equal_means_is_inverse_variance() {
        let m = moments(&[0.01, 0.01], diag(&[0.01, 0.04]));
        let w = max_sharpe(&m).unwrap();
        assert!(close(&w.weights, &[0.8, 0.2], 1e-8), "{:?}", w.weights);
        assert!(!w.min_variance_fallback);
    }

    #[test]
    fn sharpe_degenerate_identical_assets_is_feasible() {
        let m = moments(&[0.01, 0.01], vec![vec![0.04, 0.04], vec![0.04, 0.04]]);
        let w = max_sharpe(&m).unwrap().weights;
        assert!(w.iter().all(|x| *x >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn sharpe_negative_means_falls_back() {
        let m = moments(&[-0.01, -0.02], diag(&[0.01, 0.04]));
        let w = max_sharpe(&m).unwrap();
        assert!(w.min_variance_fallback);
        assert!(close(&w.weights, &[0.8, 0.2], 1e-8));
    }

    #[test]
    fn min_variance_closed_forms() {
        let m = moments(&[0.0, 0.0], diag(&[0.01, 0.04]));
        assert!(close(
            &min_variance(&m).unwrap().weights,
            &[0.8, 0.2],
            1e-10
        ));
        let m = moments(&[0.0; 4], diag(&[1.0; 4]));
        assert!(close(&min_variance(&m).unwrap().weights, &[0.25; 4], 1e-10));
    }

    #[test]
    fn risk_parity_diagonal_is_inverse_vol() {
        let vars = [0.04, 0.01, 0.09];
        let m = moments(&[0.0; 3], diag(&vars));
        let w = risk_parity(&m).unwrap().weights;
        let inv: Vec<f64> = vars.iter().map(|v| 1.0 / v.sqrt()).collect();
        let s: f64 = inv.iter().sum();
        let expected: Vec<f64> = inv.iter().map(|x| x / s).collect();
        assert!(close(&w, &expected, 1e-8), "{w:?}");
        let m = moments(&[0.0; 5], diag(&[1.0; 5]));
        assert!(close(&risk_parity(&m).unwrap().weights, &[0.2; 5], 1e-12));
    }

    #[test]
    fn max_diversification_diagonal() {
        let vars = [0.04, 0.01, 0.09];
        let m = moments(&[0.0; 3], diag(&vars));
        let w = max_diversification(&m).unwrap().weights;
        let inv: Vec<f64> = vars.iter().map(|v| 1.0 / v.sqrt()).collect();
        let s: f64 = inv.iter().sum();
        assert!(
            close(&w, &inv.iter().map(|x| x / s).collect::<Vec<_>>(), 1e-7),
            "{w:?}"
        );
        let same = moments(&[0.0; 4], diag(&[0.02; 4]));
        let w = max_diversification(&same).unwrap().weights;
        assert!((diversification_ratio(&same, &w) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn max_diversification_perfect_correlation_is_feasible() {
        let m = moments(&[0.0; 2], vec![vec![0.04, 0.04], vec![0.04, 0.04]]);
        let w = max_diversification(&m).unwrap().weights;
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        assert!((diversification_ratio(&m, &w) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn projection_onto_simplex() {
        assert!(close(&project_simplex(&[0.5, 0.5]), &[0.5, 0.5], 1e-15));
        assert!(close(&project_simplex(&[2.0, 0.0]), &[1.0, 0.0], 1e-15));
        assert!(close(
            &project_simplex(&[0.0, 0.0, 0.0]),
            &[1.0 / 3.0; 3],
            1e-15
        ));
        let p = project_simplex(&[0.3, -0.2, 1.4, 0.1]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12 && p.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn grid_tiny_cases() {
        let m = moments(&[0.0, 0.0], diag(&[1.0, 1.0]));
        let g = grid_oracle(&m, Objective::MinVariance, 0.5).unwrap();
        assert_eq!(g.n_evaluated, 3);
        assert_eq!(g.weights, vec![0.5, 0.5]);
        let one = moments(&[0.01], diag(&[0.04]));
        for obj in [
            Objective::MinVariance,
            Objective::Sharpe,
            Objective::MaxDiversification,
            Objective::RiskParity,
        ] {
            assert_eq!(grid_oracle(&one, obj, 0.1).unwrap().weights, vec![1.0]);
        }
        let three = moments(&[0.01, 0.02, 0.015], diag(&[0.04, 0.09, 0.05]));
        let g = grid_oracle(&three, Objective::Sharpe, 0.1).unwrap();
        assert_eq!(g.n_evaluated, 66);
        let w = max_sharpe(&three).unwrap().weights;
        assert!(g.value <= sharpe_ratio(&three, &w) + 1e-9);
        let six = moments(&[0.0; 6], diag(&[1.0; 6]));
        assert!(grid_oracle(&six, Objective::MinVariance, 0.5).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in PortfolioMethod::ALL {
            assert_eq!(m.name().parse::<PortfolioMethod>().unwrap(), m);
        }
        assert!("nope".parse::<PortfolioMethod>().is_err());
    }

    #[test]
    fn rejects_asymmetric_covariance() {
        assert!(RegimeMoments::new(vec![0.0, 0.0], vec![vec![1.0, 0.5], vec![0.4, 1.0]]).is_err());
        assert!(RegimeMoments::new(vec![0.0, 0.0], vec![vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
    }
}
