//! Return panels, CSV ingestion, lagging, expanding windows and synthetic
//! regime-switching data.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DATE_FORMAT: &str = "%Y-%m-%d";

/// Dated `T x L` matrix of simple daily returns, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnPanel {
    dates: Vec<NaiveDate>,
    assets: Vec<String>,
    values: Vec<f64>,
}

impl ReturnPanel {
    pub fn new(dates: Vec<NaiveDate>, assets: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if dates.is_empty() {
            return Err(Error::InsufficientData("panel has no rows".into()));
        }
        if assets.is_empty() {
            return Err(Error::InsufficientData("panel has no columns".into()));
        }
        if values.len() != dates.len() * assets.len() {
            return Err(Error::Shape {
                expected: dates.len() * assets.len(),
                got: values.len(),
            });
        }
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Format(format!(
                "dates must be strictly increasing ({} followed by {})",
                w[0], w[1]
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "non-finite value at row {}, column {}",
                pos / assets.len(),
                pos % assets.len()
            )));
        }
        Ok(Self {
            dates,
            assets,
            values,
        })
    }

    pub fn from_rows(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        rows: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let width = assets.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != width) {
            return Err(Error::Shape {
                expected: width,
                got: bad.len(),
            });
        }
        Self::new(dates, assets, rows.into_iter().flatten().collect())
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn n_rows(&self) -> usize {
        self.dates.len()
    }

    pub fn n_cols(&self) -> usize {
        self.assets.len()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let l = self.n_cols();
        &self.values[t * l..(t + 1) * l]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.n_cols())
    }

    pub fn value(&self, t: usize, j: usize) -> f64 {
        self.values[t * self.n_cols() + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Index of the row dated exactly `date`.
    pub fn position(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// Number of rows dated on or before `date`.
    pub fn rows_through(&self, date: NaiveDate) -> usize {
        self.dates.partition_point(|d| *d <= date)
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.n_rows() {
            return Err(Error::InsufficientData(format!(
                "row range {}..{} is empty or exceeds {} rows",
                range.start,
                range.end,
                self.n_rows()
            )));
        }
        let l = self.n_cols();
        Ok(Self {
            dates: self.dates[range.clone()].to_vec(),
            assets: self.assets.clone(),
            values: self.values[range.start * l..range.end * l].to_vec(),
        })
    }

    pub fn select_columns(&self, columns: &[usize]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Precondition("column selection is empty".into()));
        }
        if let Some(&bad) = columns.iter().find(|&&j| j >= self.n_cols()) {
            return Err(Error::Shape {
                expected: self.n_cols(),
                got: bad,
            });
        }
        let values = self
            .rows()
            .flat_map(|r| columns.iter().map(move |&j| r[j]))
            .collect();
        Ok(Self {
            dates: self.dates.clone(),
            assets: columns.iter().map(|&j| self.assets[j].clone()).collect(),
            values,
        })
    }

    pub fn select_assets<S: AsRef<str>>(&self, names: &[S]) -> Result<Self> {
        let columns = names
            .iter()
            .map(|n| {
                self.assets
                    .iter()
                    .position(|a| a == n.as_ref())
                    .ok_or_else(|| Error::Parameter(format!("unknown asset '{}'", n.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        self.select_columns(&columns)
    }

    /// Column-wise sample means.
    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.n_cols()];
        for r in self.rows() {
            for (m, v) in means.iter_mut().zip(r) {
                *m += v;
            }
        }
        let n = self.n_rows() as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    /// Maximum-likelihood (divide by `T`) covariance of the columns.
    pub fn covariance(&self) -> Vec<Vec<f64>> {
        let means = self.column_means();
        let l = self.n_cols();
        let mut cov = vec![vec![0.0; l]; l];
        for r in self.rows() {
            for a in 0..l {
                let da = r[a] - means[a];
                for b in a..l {
                    cov[a][b] += da * (r[b] - means[b]);
                }
            }
        }
        let n = self.n_rows() as f64;
        for a in 0..l {
            for b in a..l {
                cov[a][b] /= n;
                cov[b][a] = cov[a][b];
            }
        }
        cov
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_writer(file)
    }

    pub fn to_writer<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["date".to_string()];
        header.extend(self.assets.iter().cloned());
        w.write_record(&header)?;
        for (date, row) in self.dates.iter().zip(self.rows()) {
            let mut record = vec![date.format(DATE_FORMAT).to_string()];
            record.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Result of [`load_csv`]: the aligned panel and how many rows were dropped
/// because of missing values.
#[derive(Debug, Clone)]
pub struct LoadedPanel {
    pub panel: ReturnPanel,
    pub dropped_rows: usize,
}

pub fn load_csv<P: AsRef<Path>>(path: P, date_column: &str) -> Result<LoadedPanel> {
    let file = std::fs::File::open(path)?;
    read_csv(file, date_column)
}

fn is_missing(cell: &str) -> bool {
    matches!(
        cell.trim().to_ascii_lowercase().as_str(),
        "" | "na" | "nan" | "null" | "n/a"
    )
}

/// Parses a `date,<asset>...` CSV. Rows with any missing cell are dropped.
pub fn read_csv<R: Read>(reader: R, date_column: &str) -> Result<LoadedPanel> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let date_idx = headers
        .iter()
        .position(|h| h.trim() == date_column)
        .ok_or_else(|| Error::Format(format!("date column '{date_column}' not found in header")))?;
    let assets: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != date_idx)
        .map(|(_, h)| h.trim().to_string())
        .collect();
    if assets.is_empty() {
        return Err(Error::Format("no value columns in header".into()));
    }

    let mut rows: Vec<(NaiveDate, Vec<f64>)> = Vec::new();
    let mut dropped_rows = 0;
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let raw_date = record.get(date_idx).unwrap_or("").trim();
        let date = NaiveDate::parse_from_str(raw_date, DATE_FORMAT).map_err(|_| {
            Error::Format(format!(
                "unparseable date '{raw_date}' on data line {}",
                line + 1
            ))
        })?;
        let mut values = Vec::with_capacity(assets.len());
        let mut missing = false;
        for (i, cell) in record.iter().enumerate() {
            if i == date_idx {
                continue;
            }
            if is_missing(cell) {
                missing = true;
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::Format(format!(
                    "non-numeric value '{cell}' on data line {}",
                    line + 1
                ))
            })?;
            if v.is_finite() {
                values.push(v);
            } else {
                missing = true;
            }
        }
        if missing || values.len() != assets.len() {
            dropped_rows += 1;
            continue;
        }
        rows.push((date, values));
    }
    if rows.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} usable rows, need at least 2",
            rows.len()
        )));
    }
    rows.sort_by_key(|(d, _)| *d);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Format(format!("duplicate date {}", w[0].0)));
    }
    let (dates, values): (Vec<_>, Vec<_>) = rows.into_iter().unzip();
    let panel = ReturnPanel::from_rows(dates, assets, values)?;
    Ok(LoadedPanel {
        panel,
        dropped_rows,
    })
}

/// Shifts returns forward by `k` rows: the row dated `d_t` carries the
/// returns originally observed at `d_{t-k}`. The first `k` dates are dropped.
pub fn lag_returns(panel: &ReturnPanel, k: usize) -> Result<ReturnPanel> {
    if k == 0 {
        return Err(Error::Precondition("lag must be at least 1".into()));
    }
    let t = panel.n_rows();
    if t <= k {
        return Err(Error::InsufficientData(format!(
            "cannot lag {t} rows by {k}"
        )));
    }
    let l = panel.n_cols();
    ReturnPanel::new(
        panel.dates[k..].to_vec(),
        panel.assets.clone(),
        panel.values[..(t - k) * l].to_vec(),
    )
}

/// Training window that only grows: rows dated in `[anchor_start, cursor]`.
#[derive(Debug, Clone)]
pub struct ExpandingWindow<'a> {
    panel: &'a ReturnPanel,
    anchor_start: NaiveDate,
    cursor: NaiveDate,
}

impl<'a> ExpandingWindow<'a> {
    pub fn new(panel: &'a ReturnPanel, anchor_start: NaiveDate, cursor: NaiveDate) -> Result<Self> {
        if cursor < anchor_start {
            return Err(Error::Precondition(format!(
                "cursor {cursor} precedes anchor {anchor_start}"
            )));
        }
        Ok(Self {
            panel,
            anchor_start,
            cursor,
        })
    }

    pub fn anchor_start(&self) -> NaiveDate {
        self.anchor_start
    }

    pub fn cursor(&self) -> NaiveDate {
        self.cursor
    }

    pub fn advance_to(&mut self, cursor: NaiveDate) -> Result<()> {
        if cursor < self.cursor {
            return Err(Error::Precondition(format!(
                "expanding window cannot move back from {} to {cursor}",
                self.cursor
            )));
        }
        self.cursor = cursor;
        Ok(())
    }

    pub fn row_range(&self) -> Range<usize> {
        let start = self.panel.dates.partition_point(|d| *d < self.anchor_start);
        let end = self.panel.rows_through(self.cursor);
        start..end.max(start)
    }

    pub fn len(&self) -> usize {
        self.row_range().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice(&self) -> Result<ReturnPanel> {
        self.panel.slice_rows(self.row_range())
    }
}

fn default_noise_var() -> f64 {
    1.0
}

/// Parameters of a Markov-switching Gaussian generator with optional
/// state-independent noise columns appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub transition: Vec<Vec<f64>>,
    /// Per-state means of the relevant columns, `K x L_rel`.
    pub means: Vec<Vec<f64>>,
    /// Per-state covariances of the relevant columns.
    pub covariances: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub n_noise: usize,
    #[serde(default)]
    pub noise_mean: f64,
    #[serde(default = "default_noise_var")]
    pub noise_var: f64,
    pub length: usize,
    pub seed: u64,
    /// Initial state; drawn from the stationary distribution when absent.
    #[serde(default)]
    pub start_state: Option<usize>,
    #[serde(default)]
    pub start_date: Option<NaiveDate>,
}

impl SyntheticSpec {
    pub fn n_states(&self) -> usize {
        self.transition.len()
    }

    pub fn n_relevant(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_states();
        if k == 0 {
            return Err(Error::Parameter(
                "synthetic spec needs at least one state".into(),
            ));
        }
        if self.length == 0 {
            return Err(Error::Parameter("synthetic length must be positive".into()));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != k {
                return Err(Error::Shape {
                    expected: k,
                    got: row.len(),
                });
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::Parameter(format!(
                    "transition row {i} has entries outside [0,1]"
                )));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Parameter(format!("transition row {i} sums to {s}")));
            }
        }
        if self.means.len() != k || self.covariances.len() != k {
            return Err(Error::Shape {
                expected: k,
                got: self.means.len().min(self.covariances.len()),
            });
        }
        let l = self.n_relevant();
        if l + self.n_noise == 0 {
            return Err(Error::Parameter(
                "synthetic spec produces no columns".into(),
            ));
        }
        for (mean, cov) in self.means.iter().zip(&self.covariances) {
            if mean.len() != l {
                return Err(Error::Shape {
                    expected: l,
                    got: mean.len(),
                });
            }
            psd_factor(cov, l)?;
        }
        if self.n_noise > 0 && !(self.noise_var > 0.0) {
            return Err(Error::Parameter("noise variance must be positive".into()));
        }
        if let Some(s) = self.start_state {
            if s >= k {
                return Err(Error::Parameter(format!("start state {s} out of range")));
            }
        }
        Ok(())
    }
}

/// Returns `F` with `F F' = cov`, failing if `cov` is asymmetric or has a
/// negative eigenvalue.
fn psd_factor(cov: &[Vec<f64>], l: usize) -> Result<DMatrix<f64>> {
    if cov.len() != l || cov.iter().any(|r| r.len() != l) {
        return Err(Error::Shape {
            expected: l,
            got: cov.len(),
        });
    }
    let m = DMatrix::from_fn(l, l, |a, b| cov[a][b]);
    let scale = m
        .diagonal()
        .iter()
        .fold(0.0_f64, |acc, v| acc.max(v.abs()))
        .max(1e-300);
    for a in 0..l {
        for b in 0..a {
            if (m[(a, b)] - m[(b, a)]).abs() > 1e-12 * scale {
                return Err(Error::Parameter("covariance is not symmetric".into()));
            }
        }
    }
    let eig = SymmetricEigen::new(m);
    if eig.eigenvalues.iter().any(|&v| v < -1e-12 * scale) {
        return Err(Error::Parameter(
            "covariance is not positive semi-definite".into(),
        ));
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Stationary distribution of a row-stochastic matrix by power iteration.
pub fn stationary_distribution(transition: &[Vec<f64>]) -> Vec<f64> {
    let k = transition.len();
    let mut p = vec![1.0 / k as f64; k];
    for _ in 0..10_000 {
        let mut next = vec![0.0; k];
        for (i, row) in transition.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                next[j] += p[i] * a;
            }
        }
        let delta: f64 = next.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum();
        p = next;
        if delta < 1e-15 {
            break;
        }
    }
    p
}

fn sample_categorical(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding: fall back to the last state with positive mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Consecutive weekdays starting at `start` (rolled forward off weekends).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

pub fn default_start_date() -> NaiveDate {
    NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date")
}

/// Samples a state path and the observed panel. Relevant columns are named
/// `x1..`, noise columns `noise1..`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(ReturnPanel, Vec<usize>)> {
    spec.validate()?;
    let l_rel = spec.n_relevant();
    let factors = spec
        .covariances
        .iter()
        .map(|c| psd_factor(c, l_rel))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut state = match spec.start_state {
        Some(s) => s,
        None => sample_categorical(&mut rng, &stationary_distribution(&spec.transition)),
    };
    let width = l_rel + spec.n_noise;
    let noise_sd = spec.noise_var.sqrt();
    let mut path = Vec::with_capacity(spec.length);
    let mut values = Vec::with_capacity(spec.length * width);
    let mut z = vec![0.0; l_rel];
    for t in 0..spec.length {
        if t > 0 {
            state = sample_categorical(&mut rng, &spec.transition[state]);
        }
        path.push(state);
        z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        let f = &factors[state];
        for a in 0..l_rel {
            let shock: f64 = (0..l_rel).map(|b| f[(a, b)] * z[b]).sum();
            values.push(spec.means[state][a] + shock);
        }
        for _ in 0..spec.n_noise {
            let e: f64 = rng.sample(StandardNormal);
            values.push(spec.noise_mean + noise_sd * e);
        }
    }
    let mut assets: Vec<String> = (1..=l_rel).map(|i| format!("x{i}")).collect();
    assets.extend((1..=spec.n_noise).map(|i| format!("noise{i}")));
    let dates = business_days(
        spec.start_date.unwrap_or_else(default_start_date),
        spec.length,
    );
    Ok((ReturnPanel::new(dates, assets, values)?, path))
}
