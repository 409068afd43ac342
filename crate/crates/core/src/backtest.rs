//! Dynamic asset allocation backtests.
//!
//! A run has two stages. [`RegimeSignal::generate`] walks forward through the
//! out-of-sample days, decoding the regime of each day from lagged returns,
//! refitting the HMM at every month boundary and re-estimating per-regime
//! moments. [`RegimeSignal::replay`] then turns the predictions into trades
//! for a given confirmation window, portfolio method and cost rate. Keeping
//! the stages apart lets window calibration and method comparisons share one
//! expensive signal.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::io::Write;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use crate::data::{lag_returns, ReturnPanel};
use crate::error::{Error, Result};
use crate::fshmm::{default_priors, fit_fshmm_map, FshmmConfig, SaliencyReport};
use crate::ghmm::{fit_baum_welch, fit_from, viterbi_decode, FitConfig, HmmModel, OnlineDecoder};
use crate::metrics::compute_report;
use crate::portfolio::{construct, PortfolioMethod, RegimeMoments, DEFAULT_MAX_WEIGHT};

/// Never confirm a regime change after inception.
pub const NEVER_CONFIRM: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateSplit {
    pub train_end: NaiveDate,
    pub validation_end: NaiveDate,
    pub test_end: NaiveDate,
}

impl DateSplit {
    pub fn validate(&self) -> Result<()> {
        if self.train_end < self.validation_end && self.validation_end < self.test_end {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "date split must satisfy train_end < validation_end < test_end, got {} / {} / {}",
                self.train_end, self.validation_end, self.test_end
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaaConfig {
    pub n_states: usize,
    /// Consecutive identical predictions needed to confirm a new regime.
    pub confirm_window: usize,
    /// Charged per unit of L1 turnover.
    pub cost_rate: f64,
    pub method: PortfolioMethod,
    pub max_weight: f64,
    /// Trailing observations used for regime moments; all history if `None`.
    pub moment_span: Option<usize>,
    pub fit: FitConfig,
}

impl Default for DaaConfig {
    fn default() -> Self {
        Self {
            n_states: 2,
            confirm_window: 5,
            cost_rate: 0.005,
            method: PortfolioMethod::Sharpe,
            max_weight: DEFAULT_MAX_WEIGHT,
            moment_span: None,
            fit: FitConfig::default(),
        }
    }
}

impl DaaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 {
            return Err(Error::Parameter(
                "number of states must be at least 1".into(),
            ));
        }
        self.rule().validate()?;
        if self.moment_span == Some(0) {
            return Err(Error::Parameter("moment span must be positive".into()));
        }
        Ok(())
    }

    pub fn rule(&self) -> AllocationRule {
        AllocationRule {
            method: self.method,
            confirm_window: self.confirm_window,
            cost_rate: self.cost_rate,
            max_weight: self.max_weight,
        }
    }
}

/// How predictions become trades.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AllocationRule {
    pub method: PortfolioMethod,
    pub confirm_window: usize,
    pub cost_rate: f64,
    pub max_weight: f64,
}

impl AllocationRule {
    pub fn validate(&self) -> Result<()> {
        if self.confirm_window == 0 {
            return Err(Error::Parameter(
                "confirmation window must be at least 1".into(),
            ));
        }
        if !(self.cost_rate >= 0.0 && self.cost_rate.is_finite()) {
            return Err(Error::Parameter(format!(
                "cost rate {} must be non-negative",
                self.cost_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub date: NaiveDate,
    pub predicted_state: Option<usize>,
    pub confirmed_state: Option<usize>,
    /// Drifted weights before any trade on this date (all zero at inception).
    pub weights_before: Vec<f64>,
    /// Weights held over this date's returns.
    pub weights_after: Vec<f64>,
    pub gross_return: f64,
    pub turnover: f64,
    pub cost: f64,
    pub net_return: f64,
    pub cumulative_net_return: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebalanceEvent {
    pub date: NaiveDate,
    pub regime: Option<usize>,
    pub turnover: f64,
    pub cost: f64,
    pub weights: Vec<f64>,
    #[serde(default)]
    pub min_variance_fallback: bool,
}

/// Regime with too few labelled days; unconditional moments were used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentFallback {
    pub date: NaiveDate,
    pub state: usize,
    pub n_days: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BacktestLedger {
    pub assets: Vec<String>,
    pub rows: Vec<LedgerRow>,
    pub events: Vec<RebalanceEvent>,
}

pub const LEDGER_HEADER: [&str; 8] = [
    "date",
    "predicted_state",
    "confirmed_state",
    "gross",
    "cost",
    "net",
    "cumulative",
    "turnover",
];

fn opt(v: Option<usize>) -> String {
    v.map_or_else(String::new, |s| s.to_string())
}

impl BacktestLedger {
    pub fn net_returns(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.net_return).collect()
    }

    pub fn total_cost(&self) -> f64 {
        self.rows.iter().map(|r| r.cost).sum()
    }

    /// Rows dated after `after` (exclusive) and up to `through` (inclusive).
    pub fn between(&self, after: NaiveDate, through: NaiveDate) -> Vec<&LedgerRow> {
        self.rows
            .iter()
            .filter(|r| r.date > after && r.date <= through)
            .collect()
    }

    /// Net information ratio of the rows in `(after, through]`.
    pub fn net_ir(&self, after: NaiveDate, through: NaiveDate) -> Result<f64> {
        let net: Vec<f64> = self
            .between(after, through)
            .iter()
            .map(|r| r.net_return)
            .collect();
        Ok(compute_report(&net)?.ir)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(LEDGER_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.date.format("%Y-%m-%d").to_string(),
                opt(r.predicted_state),
                opt(r.confirmed_state),
                r.gross_return.to_string(),
                r.cost.to_string(),
                r.net_return.to_string(),
                r.cumulative_net_return.to_string(),
                r.turnover.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Returns the new regime when the last `d` predictions agree on a state
/// other than `current`.
pub fn confirm_regime_change(predictions: &[usize], current: usize, d: usize) -> Option<usize> {
    if d == 0 || predictions.len() < d {
        return None;
    }
    let tail = &predictions[predictions.len() - d..];
    let s = tail[0];
    (s != current && tail.iter().all(|&p| p == s)).then_some(s)
}

/// Most probable current state given `history` (already lagged).
pub fn predict_state_daily(model: &HmmModel, history: &ReturnPanel) -> Result<usize> {
    if history.n_rows() == 0 {
        return Err(Error::InsufficientData("empty history".into()));
    }
    Ok(*viterbi_decode(model, history)?
        .last()
        .expect("non-empty path"))
}

/// Sample mean and covariance (divisor `n - 1`) of the given rows.
pub fn sample_moments<'a, I>(rows: I, n_assets: usize) -> Result<RegimeMoments>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let rows: Vec<&[f64]> = rows.into_iter().collect();
    let n = rows.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "{n} observations for moment estimation"
        )));
    }
    let mut mean = vec![0.0; n_assets];
    for r in &rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![vec![0.0; n_assets]; n_assets];
    for r in &rows {
        for a in 0..n_assets {
            let da = r[a] - mean[a];
            for b in 0..=a {
                cov[a][b] += da * (r[b] - mean[b]);
            }
        }
    }
    for a in 0..n_assets {
        for b in 0..=a {
            let v = cov[a][b] / (n - 1) as f64;
            cov[a][b] = v;
            cov[b][a] = v;
        }
    }
    RegimeMoments::new(mean, cov)
}

/// Moments of every regime estimated at one refit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentTable {
    pub date: NaiveDate,
    pub states: Vec<RegimeMoments>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefitRecord {
    pub date: NaiveDate,
    pub n_observations: usize,
    pub log_likelihood: f64,
    pub n_iterations: usize,
    pub converged: bool,
}

/// Daily regime predictions with the moment tables in force on each day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSignal {
    pub assets: Vec<String>,
    pub n_states: usize,
    pub dates: Vec<NaiveDate>,
    pub predicted: Vec<usize>,
    /// Index into `tables` for each day.
    pub epoch: Vec<usize>,
    pub tables: Vec<MomentTable>,
    pub refits: Vec<RefitRecord>,
    pub fallbacks: Vec<MomentFallback>,
    /// Model in force on the last generated day.
    pub model: HmmModel,
    /// Set when a refit failed; the signal stops the day before.
    #[serde(default)]
    pub failure: Option<String>,
}

fn check_aligned(train: &ReturnPanel, alloc: &ReturnPanel) -> Result<()> {
    if train.dates() != alloc.dates() {
        return Err(Error::Precondition(
            "training and allocation panels must share the same dates".into(),
        ));
    }
    Ok(())
}

fn new_month(prev: NaiveDate, day: NaiveDate) -> bool {
    (prev.year(), prev.month()) != (day.year(), day.month())
}

struct MomentEstimator<'a> {
    alloc: &'a ReturnPanel,
    n_states: usize,
    span: Option<usize>,
}

impl MomentEstimator<'_> {
    /// Moments per state from labels of raw rows `0..labels.len()`.
    fn estimate(
        &self,
        labels: &[usize],
        date: NaiveDate,
        fallbacks: &mut Vec<MomentFallback>,
    ) -> Result<MomentTable> {
        let l = self.alloc.n_cols();
        let end = labels.len();
        let start = self.span.map_or(0, |s| end.saturating_sub(s));
        let unconditional = sample_moments((start..end).map(|i| self.alloc.row(i)), l)?;
        let mut states = Vec::with_capacity(self.n_states);
        for s in 0..self.n_states {
            let idx: Vec<usize> = (start..end).filter(|&i| labels[i] == s).collect();
            if idx.len() >= l + 2 {
                states.push(sample_moments(idx.iter().map(|&i| self.alloc.row(i)), l)?);
            } else {
                log::warn!(
                    "regime {s} has {} labelled days on {date}; using unconditional moments",
                    idx.len()
                );
                fallbacks.push(MomentFallback {
                    date,
                    state: s,
                    n_days: idx.len(),
                });
                states.push(unconditional.clone());
            }
        }
        Ok(MomentTable { date, states })
    }
}

impl RegimeSignal {
    /// Walks forward over the days in `(train_end, end]`.
    ///
    /// The model sees returns lagged by one day, so the prediction for a date
    /// uses returns up to the previous trading day only. At the first trading
    /// day of each new month the model is refit on the expanded window,
    /// warm-started from the previous parameters.
    pub fn generate(
        train: &ReturnPanel,
        alloc: &ReturnPanel,
        config: &DaaConfig,
        train_end: NaiveDate,
        end: NaiveDate,
    ) -> Result<Self> {
        config.validate()?;
        check_aligned(train, alloc)?;
        let lagged = lag_returns(train, 1)?;
        // row i of the lagged panel holds raw row i and is dated raw row i + 1
        let n_fit = lagged.rows_through(train_end);
        if n_fit <= config.n_states {
            return Err(Error::InsufficientData(format!(
                "{n_fit} training observations up to {train_end}"
            )));
        }
        let first = train.rows_through(train_end);
        let last = train.rows_through(end);
        if first >= last {
            return Err(Error::InsufficientData(format!(
                "no trading days in ({train_end}, {end}]"
            )));
        }
        let (model, report) =
            fit_baum_welch(&lagged.slice_rows(0..n_fit)?, config.n_states, &config.fit)?;
        let estimator = MomentEstimator {
            alloc,
            n_states: config.n_states,
            span: config.moment_span,
        };
        let mut signal = RegimeSignal {
            assets: alloc.assets().to_vec(),
            n_states: config.n_states,
            dates: Vec::new(),
            predicted: Vec::new(),
            epoch: Vec::new(),
            tables: Vec::new(),
            refits: vec![RefitRecord {
                date: train_end,
                n_observations: n_fit,
                log_likelihood: report.log_likelihood,
                n_iterations: report.n_iterations,
                converged: report.converged,
            }],
            fallbacks: Vec::new(),
            model,
            failure: None,
        };
        let refit_config = FitConfig {
            n_restarts: 1,
            ..config.fit.clone()
        };

        let mut decoder: Option<OnlineDecoder> = None;
        for day in first..last {
            let date = train.dates()[day];
            // lagged rows 0..day are dated up to and including `date`
            let n_hist = day;
            let refit = day > first && new_month(train.dates()[day - 1], date);
            if refit {
                let window = lagged.slice_rows(0..n_hist)?;
                match fit_from(&window, &signal.model, &refit_config) {
                    Ok((m, rep)) => {
                        signal.model = m;
                        signal.refits.push(RefitRecord {
                            date,
                            n_observations: n_hist,
                            log_likelihood: rep.log_likelihood,
                            n_iterations: rep.n_iterations,
                            converged: rep.converged,
                        });
                    }
                    Err(e) => {
                        signal.failure = Some(format!("refit on {date} failed: {e}"));
                        return Ok(signal);
                    }
                }
            }
            let state = match decoder.as_mut().filter(|_| !refit) {
                Some(dec) => dec.push(lagged.row(n_hist - 1))?,
                None => {
                    let window = lagged.slice_rows(0..n_hist)?;
                    let labels = viterbi_decode(&signal.model, &window)?;
                    let table = estimator.estimate(&labels, date, &mut signal.fallbacks)?;
                    signal.tables.push(table);
                    let mut dec = OnlineDecoder::new(&signal.model)?;
                    let mut s = 0;
                    for row in window.rows() {
                        s = dec.push(row)?;
                    }
                    decoder = Some(dec);
                    s
                }
            };
            signal.dates.push(date);
            signal.predicted.push(state);
            signal.epoch.push(signal.tables.len() - 1);
        }
        Ok(signal)
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Number of signal days dated on or before `date`.
    pub fn days_through(&self, date: NaiveDate) -> usize {
        self.dates.partition_point(|d| *d <= date)
    }

    /// Trades the first `n_days` signal days under `rule`.
    pub fn replay(
        &self,
        alloc: &ReturnPanel,
        rule: &AllocationRule,
        n_days: usize,
    ) -> Result<BacktestLedger> {
        rule.validate()?;
        if alloc.assets() != self.assets.as_slice() {
            return Err(Error::Precondition(
                "allocation panel differs from the signal's assets".into(),
            ));
        }
        let n_days = n_days.min(self.len());
        let mut cache: HashMap<(usize, usize), (Vec<f64>, bool)> = HashMap::new();
        let mut book = Book::new(alloc.assets().to_vec(), rule.cost_rate);
        let mut current: Option<usize> = None;
        for n in 0..n_days {
            let date = self.dates[n];
            let predicted = self.predicted[n];
            let target = match current {
                None => Some(predicted),
                Some(c) => confirm_regime_change(&self.predicted[..=n], c, rule.confirm_window),
            };
            let trade = match target {
                Some(s) => {
                    current = Some(s);
                    let key = (self.epoch[n], s);
                    let entry = match cache.entry(key) {
                        Entry::Occupied(e) => e.into_mut(),
                        Entry::Vacant(e) => {
                            let m = &self.tables[key.0].states[s];
                            let w = construct(rule.method, m, rule.max_weight)?;
                            e.insert((w.weights, w.min_variance_fallback))
                        }
                    };
                    Some(entry.clone())
                }
                None => None,
            };
            let row = alloc.position(date).ok_or_else(|| {
                Error::Precondition(format!("allocation panel has no row for {date}"))
            })?;
            book.step(date, Some(predicted), current, trade, alloc.row(row))?;
        }
        Ok(book.ledger)
    }
}

/// Running portfolio state shared by the DAA and benchmark loops.
struct Book {
    ledger: BacktestLedger,
    cost_rate: f64,
    weights: Vec<f64>,
    wealth: f64,
}

impl Book {
    fn new(assets: Vec<String>, cost_rate: f64) -> Self {
        let n = assets.len();
        Self {
            ledger: BacktestLedger {
                assets,
                ..Default::default()
            },
            cost_rate,
            weights: vec![0.0; n],
            wealth: 1.0,
        }
    }

    fn step(
        &mut self,
        date: NaiveDate,
        predicted: Option<usize>,
        confirmed: Option<usize>,
        trade: Option<(Vec<f64>, bool)>,
        returns: &[f64],
    ) -> Result<()> {
        let before = self.weights.clone();
        let (after, turnover) = match trade {
            Some((w, fallback)) => {
                let turnover: f64 = w.iter().zip(&before).map(|(a, b)| (a - b).abs()).sum();
                self.ledger.events.push(RebalanceEvent {
                    date,
                    regime: confirmed,
                    turnover,
                    cost: self.cost_rate * turnover,
                    weights: w.clone(),
                    min_variance_fallback: fallback,
                });
                (w, turnover)
            }
            None => (before.clone(), 0.0),
        };
        let cost = self.cost_rate * turnover;
        let gross: f64 = after.iter().zip(returns).map(|(w, r)| w * r).sum();
        let net = gross - cost;
        self.wealth *= 1.0 + net;
        let growth = 1.0 + gross;
        if !(growth > 0.0) {
            return Err(Error::Numerical(format!("portfolio wiped out on {date}")));
        }
        self.weights = after
            .iter()
            .zip(returns)
            .map(|(w, r)| w * (1.0 + r) / growth)
            .collect();
        self.ledger.rows.push(LedgerRow {
            date,
            predicted_state: predicted,
            confirmed_state: confirmed,
            weights_before: before,
            weights_after: after,
            gross_return: gross,
            turnover,
            cost,
            net_return: net,
            cumulative_net_return: self.wealth - 1.0,
        });
        Ok(())
    }
}

/// Outcome of [`run_daa`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaaRun {
    pub ledger: BacktestLedger,
    pub signal: RegimeSignal,
}

/// Full DAA backtest over the validation and test days.
pub fn run_daa(
    train: &ReturnPanel,
    alloc: &ReturnPanel,
    config: &DaaConfig,
    split: &DateSplit,
) -> Result<DaaRun> {
    split.validate()?;
    let signal = RegimeSignal::generate(train, alloc, config, split.train_end, split.test_end)?;
    let ledger = signal.replay(alloc, &config.rule(), signal.len())?;
    if let Some(msg) = &signal.failure {
        let date = train
            .dates()
            .get(train.rows_through(signal.dates.last().copied().unwrap_or(split.train_end)))
            .map_or_else(|| split.test_end.to_string(), |d| d.to_string());
        return Err(Error::Aborted {
            date,
            source: Box::new(Error::Numerical(msg.clone())),
            partial: Box::new(ledger),
        });
    }
    Ok(DaaRun { ledger, signal })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RebalanceSchedule {
    Monthly,
    InceptionOnly,
}

/// Single-regime benchmark: rebalances to the method's portfolio on
/// unconditional expanding-window moments of all returns before each
/// rebalance date.
pub fn run_benchmark(
    alloc: &ReturnPanel,
    method: PortfolioMethod,
    cost_rate: f64,
    max_weight: f64,
    after: NaiveDate,
    through: NaiveDate,
    schedule: RebalanceSchedule,
) -> Result<BacktestLedger> {
    if !(cost_rate >= 0.0 && cost_rate.is_finite()) {
        return Err(Error::Parameter(format!(
            "cost rate {cost_rate} must be non-negative"
        )));
    }
    let first = alloc.rows_through(after);
    let last = alloc.rows_through(through);
    if first >= last {
        return Err(Error::InsufficientData(format!(
            "no trading days in ({after}, {through}]"
        )));
    }
    let l = alloc.n_cols();
    let mut book = Book::new(alloc.assets().to_vec(), cost_rate);
    for day in first..last {
        let date = alloc.dates()[day];
        let due = day == first
            || (schedule == RebalanceSchedule::Monthly && new_month(alloc.dates()[day - 1], date));
        let trade = if due {
            let w = if method == PortfolioMethod::EqualWeight {
                crate::portfolio::equal_weight(l)?
            } else {
                let m = sample_moments((0..day).map(|i| alloc.row(i)), l)?;
                construct(method, &m, max_weight)?
            };
            Some((w.weights, w.min_variance_fallback))
        } else {
            None
        };
        book.step(date, None, None, trade, alloc.row(day))?;
    }
    Ok(book.ledger)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowScore {
    pub confirm_window: usize,
    pub net_ir: f64,
    pub total_cost: f64,
    pub n_rebalances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub best_window: usize,
    pub table: Vec<WindowScore>,
}

/// Scores each candidate window by net IR over the first `n_days` of the
/// signal. The best score wins; ties go to the smaller window.
pub fn calibrate_on_signal(
    signal: &RegimeSignal,
    alloc: &ReturnPanel,
    rule: &AllocationRule,
    candidates: &[usize],
    n_days: usize,
) -> Result<Calibration> {
    if candidates.is_empty() {
        return Err(Error::Parameter("no candidate windows".into()));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut table = Vec::with_capacity(sorted.len());
    for &d in &sorted {
        let ledger = signal.replay(
            alloc,
            &AllocationRule {
                confirm_window: d,
                ..*rule
            },
            n_days,
        )?;
        table.push(WindowScore {
            confirm_window: d,
            net_ir: compute_report(&ledger.net_returns())?.ir,
            total_cost: ledger.total_cost(),
            n_rebalances: ledger.events.len(),
        });
    }
    let mut best = &table[0];
    for s in &table[1..] {
        if s.net_ir > best.net_ir {
            best = s;
        }
    }
    Ok(Calibration {
        best_window: best.confirm_window,
        table,
    })
}

/// Calibrates the confirmation window on the validation days only.
pub fn calibrate_window(
    train: &ReturnPanel,
    alloc: &ReturnPanel,
    config: &DaaConfig,
    candidates: &[usize],
    split: &DateSplit,
) -> Result<Calibration> {
    split.validate()?;
    if candidates.is_empty() {
        return Err(Error::Parameter("no candidate windows".into()));
    }
    let signal =
        RegimeSignal::generate(train, alloc, config, split.train_end, split.validation_end)?;
    if let Some(msg) = &signal.failure {
        return Err(Error::Numerical(msg.clone()));
    }
    calibrate_on_signal(&signal, alloc, &config.rule(), candidates, signal.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelectionConfig {
    /// Saliency weight per feature is `k_scale` times the training length.
    pub k_scale: f64,
    pub threshold: f64,
    pub fshmm: FshmmConfig,
}

impl Default for FeatureSelectionConfig {
    fn default() -> Self {
        Self {
            k_scale: 0.25,
            threshold: 0.9,
            fshmm: FshmmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSelection {
    pub report: SaliencyReport,
    pub selected: Vec<String>,
}

/// Fits the saliency model on the lagged training window and keeps the
/// features at or above the threshold.
pub fn select_training_features(
    train: &ReturnPanel,
    n_states: usize,
    fs: &FeatureSelectionConfig,
    train_end: NaiveDate,
) -> Result<FeatureSelection> {
    let lagged = lag_returns(train, 1)?;
    let window = lagged.slice_rows(0..lagged.rows_through(train_end))?;
    let priors = default_priors(&window, n_states, fs.k_scale)?;
    let cfg = FshmmConfig {
        threshold: fs.threshold,
        ..fs.fshmm.clone()
    };
    let (_, report) = fit_fshmm_map(&window, n_states, &priors, &cfg)?;
    let idx = report.select(fs.threshold)?;
    if idx.is_empty() {
        let max = report
            .saliency
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        return Err(Error::Pipeline(format!(
            "no feature reached saliency threshold {}; highest saliency {max:.4}",
            fs.threshold
        )));
    }
    let selected = idx.iter().map(|&i| train.assets()[i].clone()).collect();
    Ok(FeatureSelection { report, selected })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FsDaaRun {
    pub selection: FeatureSelection,
    pub run: DaaRun,
}

/// Feature-selected DAA: saliency selection once on the training window,
/// then a full-covariance DAA run on the selected training features.
pub fn run_fs_daa(
    train: &ReturnPanel,
    alloc: &ReturnPanel,
    fs: &FeatureSelectionConfig,
    config: &DaaConfig,
    split: &DateSplit,
) -> Result<FsDaaRun> {
    split.validate()?;
    check_aligned(train, alloc)?;
    let selection = select_training_features(train, config.n_states, fs, split.train_end)?;
    let subset = train.select_assets(&selection.selected)?;
    let run = run_daa(&subset, alloc, config, split)?;
    Ok(FsDaaRun { selection, run })
}
