use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use regime_core::backtest::*;
use regime_core::data::{generate_synthetic, ReturnPanel};
use regime_core::fshmm::{default_priors, fit_fshmm_map, FshmmDocument};
use regime_core::ghmm::{fit_baum_welch, select_n_states, HmmDocument};
use regime_core::metrics::{compute_report, PerformanceReport, CSV_HEADER};
use regime_core::portfolio::PortfolioMethod;
use serde::{Deserialize, Serialize};

use crate::config::{sha256_hex, InputFile, ModelKind, RunConfig};
use crate::error::{io_context, CliError, CliResult};

pub fn create_dir(dir: &Path) -> CliResult<()> {
    io_context(std::fs::create_dir_all(dir), || {
        format!("creating {}", dir.display())
    })
}

pub fn create_file(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(io_context(File::create(path), || {
        format!("creating {}", path.display())
    })?))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create_file(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    io_context(writeln!(w).and_then(|_| w.flush()), || {
        format!("writing {}", path.display())
    })
}

fn wrote(path: &Path) {
    println!("wrote {}", path.display());
}

pub fn generate(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let spec = cfg.synthetic.resolve(cfg.seed)?;
    let (panel, states) = generate_synthetic(&spec)?;
    create_dir(out)?;
    let panel_path = out.join("panel.csv");
    panel.to_writer(create_file(&panel_path)?)?;
    wrote(&panel_path);

    let states_path = out.join("states.csv");
    let mut w = csv::Writer::from_writer(create_file(&states_path)?);
    w.write_record(["date", "state"])?;
    for (d, s) in panel.dates().iter().zip(&states) {
        w.write_record([d.to_string(), s.to_string()])?;
    }
    io_context(w.flush(), || format!("writing {}", states_path.display()))?;
    wrote(&states_path);

    let spec_path = out.join("spec.json");
    write_json(&spec_path, &spec)?;
    wrote(&spec_path);
    Ok(())
}

/// Training rows up to the configured training end, or all rows.
fn training_window(cfg: &RunConfig, train: &ReturnPanel) -> CliResult<ReturnPanel> {
    match &cfg.split {
        Some(_) => {
            let split = cfg.split(train)?;
            Ok(train.slice_rows(0..train.rows_through(split.train_end))?)
        }
        None => Ok(train.clone()),
    }
}

pub fn fit(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let inputs = cfg.inputs()?;
    let window = training_window(cfg, &inputs.train)?;
    create_dir(out)?;
    match cfg.model.kind {
        ModelKind::Hmm => {
            let fit_cfg = cfg.fit_config();
            let k = match &cfg.model.candidate_states {
                Some(c) => {
                    let (k, table) = select_n_states(&window, c, &fit_cfg)?;
                    let path = out.join("bic.json");
                    write_json(&path, &table)?;
                    wrote(&path);
                    k
                }
                None => cfg.model.states,
            };
            let (model, report) = fit_baum_welch(&window, k, &fit_cfg)?;
            let path = out.join("hmm_model.json");
            write_json(
                &path,
                &HmmDocument::new(model, window.assets().to_vec(), Some(report)),
            )?;
            wrote(&path);
        }
        ModelKind::Fshmm => {
            let priors = default_priors(&window, cfg.model.states, cfg.model.k_scale)?;
            let (model, report) = fit_fshmm_map(
                &window,
                cfg.model.states,
                &priors,
                &cfg.fshmm_config(cfg.model.n_restarts),
            )?;
            let path = out.join("saliency_report.json");
            write_json(&path, &report)?;
            wrote(&path);
            let path = out.join("fshmm_model.json");
            write_json(
                &path,
                &FshmmDocument::new(model, priors, report, window.assets().to_vec()),
            )?;
            wrote(&path);
        }
    }
    Ok(())
}

fn selection_end(cfg: &RunConfig, train: &ReturnPanel) -> CliResult<NaiveDate> {
    match &cfg.split {
        Some(_) => Ok(cfg.split(train)?.train_end),
        None => train
            .dates()
            .last()
            .copied()
            .ok_or_else(|| CliError::Usage("training panel is empty".into())),
    }
}

pub fn select_features(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let inputs = cfg.inputs()?;
    let end = selection_end(cfg, &inputs.train)?;
    let selection = select_training_features(
        &inputs.train,
        cfg.model.states,
        &cfg.feature_selection(),
        end,
    )?;
    create_dir(out)?;
    let path = out.join("selection.json");
    write_json(&path, &selection)?;
    wrote(&path);
    Ok(())
}

fn write_calibration_csv(path: &Path, cal: &Calibration) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(create_file(path)?);
    w.write_record(["confirm_window", "net_ir", "total_cost", "n_rebalances"])?;
    for s in &cal.table {
        w.write_record([
            s.confirm_window.to_string(),
            s.net_ir.to_string(),
            s.total_cost.to_string(),
            s.n_rebalances.to_string(),
        ])?;
    }
    io_context(w.flush(), || format!("writing {}", path.display()))
}

fn candidate_windows(cfg: &RunConfig) -> CliResult<Vec<usize>> {
    cfg.portfolio.candidate_windows.clone().ok_or_else(|| {
        CliError::Usage(
            "no candidate windows; pass --windows or set portfolio.candidate_windows".into(),
        )
    })
}

/// Applies saliency selection to the training panel when enabled.
fn selected_training(
    cfg: &RunConfig,
    train: &ReturnPanel,
    split: &DateSplit,
) -> CliResult<(ReturnPanel, Option<FeatureSelection>)> {
    if !cfg.selection.enabled {
        return Ok((train.clone(), None));
    }
    let sel = select_training_features(
        train,
        cfg.model.states,
        &cfg.feature_selection(),
        split.train_end,
    )?;
    log::info!("selected features: {}", sel.selected.join(", "));
    Ok((train.select_assets(&sel.selected)?, Some(sel)))
}

pub fn calibrate(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let windows = candidate_windows(cfg)?;
    let inputs = cfg.inputs()?;
    let split = cfg.split(&inputs.alloc)?;
    let (train, _) = selected_training(cfg, &inputs.train, &split)?;
    let base = cfg.daa_config(cfg.portfolio.methods[0], cfg.portfolio.confirm_window);
    let signal = RegimeSignal::generate(
        &train,
        &inputs.alloc,
        &base,
        split.train_end,
        split.validation_end,
    )?;
    if let Some(msg) = &signal.failure {
        return Err(regime_core::Error::Numerical(msg.clone()).into());
    }
    create_dir(out)?;
    for &method in &cfg.portfolio.methods {
        let rule = cfg.daa_config(method, cfg.portfolio.confirm_window).rule();
        let cal = calibrate_on_signal(&signal, &inputs.alloc, &rule, &windows, signal.len())?;
        println!("{method}: best confirmation window {}", cal.best_window);
        let path = out.join(format!("calibration_{method}.json"));
        write_json(&path, &cal)?;
        wrote(&path);
        let path = out.join(format!("calibration_{method}.csv"));
        write_calibration_csv(&path, &cal)?;
        wrote(&path);
    }
    Ok(())
}

/// Metrics over the validation and test periods of one ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodReports {
    pub validation: Option<PerformanceReport>,
    pub test: Option<PerformanceReport>,
}

fn period_report(
    ledger: &BacktestLedger,
    after: NaiveDate,
    through: NaiveDate,
) -> Option<PerformanceReport> {
    let r: Vec<f64> = ledger
        .between(after, through)
        .iter()
        .map(|row| row.net_return)
        .collect();
    compute_report(&r).ok()
}

pub fn period_reports(ledger: &BacktestLedger, split: &DateSplit) -> PeriodReports {
    PeriodReports {
        validation: period_report(ledger, split.train_end, split.validation_end),
        test: period_report(ledger, split.validation_end, split.test_end),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunEntry {
    pub variant: String,
    pub method: PortfolioMethod,
    pub confirm_window: Option<usize>,
    pub calibration: Option<Calibration>,
    pub ledger: PathBuf,
    pub report: PathBuf,
    pub events: Vec<RebalanceEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub master: u64,
    pub fit: u64,
    pub synthetic: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestManifest {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub seeds: Seeds,
    pub inputs: Vec<InputFile>,
    pub split: DateSplit,
    pub selection: Option<FeatureSelection>,
    /// SHA-256 of the JSON of the model in force on the last day.
    pub model_sha256: String,
    pub refits: Vec<RefitRecord>,
    pub moment_fallbacks: Vec<MomentFallback>,
    pub aborted: Option<String>,
    pub runs: Vec<RunEntry>,
}

fn seeds(cfg: &RunConfig, synthetic: bool) -> Seeds {
    Seeds {
        master: cfg.seed,
        fit: cfg.fit_config().seed,
        synthetic: synthetic.then(|| cfg.synthetic.seed.unwrap_or(cfg.seed)),
    }
}

struct Writer<'a> {
    out: &'a Path,
    split: DateSplit,
}

impl Writer<'_> {
    fn ledger(&self, name: &str, ledger: &BacktestLedger) -> CliResult<(PathBuf, PathBuf)> {
        let ledger_name = PathBuf::from(format!("ledger_{name}.csv"));
        let path = self.out.join(&ledger_name);
        ledger.write_csv(create_file(&path)?)?;
        wrote(&path);
        let report_name = PathBuf::from(format!("report_{name}.json"));
        let path = self.out.join(&report_name);
        write_json(&path, &period_reports(ledger, &self.split))?;
        wrote(&path);
        Ok((ledger_name, report_name))
    }
}

pub fn backtest(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let inputs = cfg.inputs()?;
    let split = cfg.split(&inputs.alloc)?;
    let (train, selection) = selected_training(cfg, &inputs.train, &split)?;
    let variant = if selection.is_some() { "fs_daa" } else { "daa" };
    let base = cfg.daa_config(cfg.portfolio.methods[0], cfg.portfolio.confirm_window);
    let signal = RegimeSignal::generate(
        &train,
        &inputs.alloc,
        &base,
        split.train_end,
        split.test_end,
    )?;
    let n_validation = signal.days_through(split.validation_end);
    create_dir(out)?;
    let writer = Writer { out, split };

    let mut runs = Vec::new();
    for &method in &cfg.portfolio.methods {
        let mut rule = cfg.daa_config(method, cfg.portfolio.confirm_window).rule();
        let calibration = match &cfg.portfolio.candidate_windows {
            Some(c) if signal.failure.is_none() || n_validation < signal.len() => {
                let cal = calibrate_on_signal(&signal, &inputs.alloc, &rule, c, n_validation)?;
                rule.confirm_window = cal.best_window;
                Some(cal)
            }
            _ => None,
        };
        let ledger = signal.replay(&inputs.alloc, &rule, signal.len())?;
        let (ledger_path, report_path) = writer.ledger(&format!("{variant}_{method}"), &ledger)?;
        runs.push(RunEntry {
            variant: variant.into(),
            method,
            confirm_window: Some(rule.confirm_window),
            calibration,
            ledger: ledger_path,
            report: report_path,
            events: ledger.events,
        });

        let bench = run_benchmark(
            &inputs.alloc,
            method,
            rule.cost_rate,
            rule.max_weight,
            split.train_end,
            split.test_end,
            cfg.portfolio.benchmark_schedule,
        )?;
        let (ledger_path, report_path) = writer.ledger(&format!("benchmark_{method}"), &bench)?;
        runs.push(RunEntry {
            variant: "benchmark".into(),
            method,
            confirm_window: None,
            calibration: None,
            ledger: ledger_path,
            report: report_path,
            events: bench.events,
        });
    }

    let manifest = BacktestManifest {
        command: "backtest".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        seeds: seeds(cfg, cfg.data.panel.is_none()),
        inputs: inputs.files,
        split,
        selection,
        model_sha256: sha256_hex(serde_json::to_string(&signal.model)?.as_bytes()),
        refits: signal.refits.clone(),
        moment_fallbacks: signal.fallbacks.clone(),
        aborted: signal.failure.clone(),
        runs,
    };
    let path = out.join("manifest.json");
    write_json(&path, &manifest)?;
    wrote(&path);
    if let Some(msg) = signal.failure {
        return Err(
            regime_core::Error::Numerical(format!("{msg}; partial ledgers written")).into(),
        );
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LedgerReport {
    ledger: PathBuf,
    report: PerformanceReport,
}

/// Reads the `date` and `net` columns of a ledger CSV.
fn read_net_returns(
    path: &Path,
    after: Option<NaiveDate>,
    through: Option<NaiveDate>,
) -> CliResult<Vec<f64>> {
    let file = io_context(File::open(path), || format!("opening {}", path.display()))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Usage(format!("{}: no '{name}' column", path.display())))
    };
    let (date_col, net_col) = (col("date")?, col("net")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let bad = |what: &str| {
            CliError::Usage(format!(
                "{}: bad {what} '{}'",
                path.display(),
                rec.as_slice()
            ))
        };
        let date =
            NaiveDate::parse_from_str(&rec[date_col], "%Y-%m-%d").map_err(|_| bad("date"))?;
        if after.is_some_and(|a| date <= a) || through.is_some_and(|t| date > t) {
            continue;
        }
        out.push(rec[net_col].parse::<f64>().map_err(|_| bad("net return"))?);
    }
    Ok(out)
}

pub fn report(
    ledgers: &[PathBuf],
    after: Option<NaiveDate>,
    through: Option<NaiveDate>,
    out: &Path,
) -> CliResult<()> {
    if ledgers.is_empty() {
        return Err(CliError::Usage("no ledgers given".into()));
    }
    let mut reports = Vec::with_capacity(ledgers.len());
    for path in ledgers {
        let r = read_net_returns(path, after, through)?;
        reports.push(LedgerReport {
            ledger: path.clone(),
            report: compute_report(&r)?,
        });
    }
    create_dir(out)?;
    let path = out.join("report.csv");
    let mut w = csv::Writer::from_writer(create_file(&path)?);
    w.write_record(std::iter::once("ledger").chain(CSV_HEADER))?;
    for r in &reports {
        let name = r.ledger.display().to_string();
        w.write_record(std::iter::once(name).chain(r.report.csv_values()))?;
    }
    io_context(w.flush(), || format!("writing {}", path.display()))?;
    wrote(&path);
    let path = out.join("report.json");
    write_json(&path, &reports)?;
    wrote(&path);
    Ok(())
}
