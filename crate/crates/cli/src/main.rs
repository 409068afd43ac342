#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use regime_core::portfolio::PortfolioMethod;

use config::{parse_windows, ModelKind, RunConfig, Scenario};
use error::{CliError, CliResult};

/// Regime-switching asset allocation: synthetic data, HMM fitting, feature
/// selection and backtests.
#[derive(Debug, Parser)]
#[command(name = "regime", version)]
struct Cli {
    /// TOML run configuration, or a manifest.json from an earlier run.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Output directory. Falls back to the config, then $REGIME_OUTPUT_DIR.
    #[arg(short, long, global = true)]
    output_dir: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic panel, its state path and the generator spec.
    Generate(GenerateArgs),
    /// Fit a Gaussian HMM or a feature-saliency HMM.
    Fit(FitArgs),
    /// Rank training features by saliency and keep those above the threshold.
    SelectFeatures(SelectArgs),
    /// Score confirmation windows on the validation period.
    CalibrateWindow(CalibrateArgs),
    /// Run the regime allocation and the single-regime benchmark.
    Backtest(BacktestArgs),
    /// Run many asset combinations and collect test-period metrics.
    Sweep(SweepArgs),
    /// Performance metrics for ledger CSV files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Allocation return panel (CSV with a date column).
    #[arg(long)]
    panel: Option<PathBuf>,
    /// Panel the regime model is trained on; defaults to --panel.
    #[arg(long)]
    train_panel: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Number of hidden states.
    #[arg(long)]
    states: Option<usize>,
    /// EM restarts.
    #[arg(long)]
    restarts: Option<usize>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, value_parser = parse_scenario)]
    scenario: Option<Scenario>,
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    n_noise: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model_args: ModelArgs,
    #[arg(long, value_enum)]
    model: Option<ModelKind>,
    /// Choose the number of states among these by BIC, e.g. 1..4.
    #[arg(long, value_parser = parse_list)]
    select_states: Option<List>,
    /// Saliency prior weight per feature as a fraction of the sample length.
    #[arg(long)]
    k_scale: Option<f64>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model_args: ModelArgs,
    #[arg(long)]
    k_scale: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Args)]
struct PortfolioArgs {
    /// Portfolio rule; repeat for several.
    #[arg(long = "method", value_parser = parse_method)]
    methods: Vec<PortfolioMethod>,
    #[arg(long)]
    cost_rate: Option<f64>,
    #[arg(long)]
    max_weight: Option<f64>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model_args: ModelArgs,
    #[command(flatten)]
    portfolio: PortfolioArgs,
    /// Candidate windows, e.g. 1..30 or 1,5,10.
    #[arg(long, value_parser = parse_list)]
    windows: Option<List>,
}

#[derive(Debug, Args)]
struct BacktestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model_args: ModelArgs,
    #[command(flatten)]
    portfolio: PortfolioArgs,
    #[arg(long)]
    confirm_window: Option<usize>,
    /// Calibrate the confirmation window over these candidates first.
    #[arg(long, value_parser = parse_list)]
    calibrate_window: Option<List>,
    /// Select training features by saliency before fitting.
    #[arg(long)]
    feature_selection: bool,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model_args: ModelArgs,
    #[command(flatten)]
    portfolio: PortfolioArgs,
    #[arg(long)]
    combinations: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Ledger CSV written by `backtest`; repeat for several.
    #[arg(long = "ledger", required = true)]
    ledgers: Vec<PathBuf>,
    /// Only days strictly after this date.
    #[arg(long)]
    after: Option<NaiveDate>,
    /// Only days up to and including this date.
    #[arg(long)]
    through: Option<NaiveDate>,
}

/// Positive integers given as `a..b` or `a,b,c`.
#[derive(Debug, Clone)]
struct List(Vec<usize>);

fn parse_list(s: &str) -> Result<List, String> {
    parse_windows(s).map(List)
}

fn parse_method(s: &str) -> Result<PortfolioMethod, String> {
    s.parse().map_err(|e: regime_core::Error| e.to_string())
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|e| e.to_string())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl DataArgs {
    fn apply(self, cfg: &mut RunConfig) {
        if self.panel.is_some() {
            cfg.data.panel = self.panel;
        }
        if self.train_panel.is_some() {
            cfg.data.train_panel = self.train_panel;
        }
    }
}

impl ModelArgs {
    fn apply(self, cfg: &mut RunConfig) {
        set(&mut cfg.model.states, self.states);
        set(&mut cfg.model.n_restarts, self.restarts);
    }
}

impl PortfolioArgs {
    fn apply(self, cfg: &mut RunConfig) {
        if !self.methods.is_empty() {
            cfg.portfolio.methods = self.methods;
        }
        set(&mut cfg.portfolio.cost_rate, self.cost_rate);
        set(&mut cfg.portfolio.max_weight, self.max_weight);
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    set(&mut cfg.seed, cli.seed);
    let out = cfg.output_dir(cli.output_dir.as_deref());
    let action: fn(&RunConfig, &std::path::Path) -> CliResult<()> = match cli.command {
        Command::Generate(a) => {
            set(&mut cfg.synthetic.scenario, a.scenario);
            set(&mut cfg.synthetic.length, a.length);
            set(&mut cfg.synthetic.n_noise, a.n_noise);
            set(&mut cfg.synthetic.separation, a.separation);
            commands::generate
        }
        Command::Fit(a) => {
            a.data.apply(&mut cfg);
            a.model_args.apply(&mut cfg);
            set(&mut cfg.model.kind, a.model);
            set(&mut cfg.model.k_scale, a.k_scale);
            if a.select_states.is_some() {
                cfg.model.candidate_states = a.select_states.map(|l| l.0);
            }
            commands::fit
        }
        Command::SelectFeatures(a) => {
            a.data.apply(&mut cfg);
            a.model_args.apply(&mut cfg);
            set(&mut cfg.model.k_scale, a.k_scale);
            set(&mut cfg.selection.threshold, a.threshold);
            commands::select_features
        }
        Command::CalibrateWindow(a) => {
            a.data.apply(&mut cfg);
            a.model_args.apply(&mut cfg);
            a.portfolio.apply(&mut cfg);
            if a.windows.is_some() {
                cfg.portfolio.candidate_windows = a.windows.map(|l| l.0);
            }
            commands::calibrate
        }
        Command::Backtest(a) => {
            a.data.apply(&mut cfg);
            a.model_args.apply(&mut cfg);
            a.portfolio.apply(&mut cfg);
            set(&mut cfg.portfolio.confirm_window, a.confirm_window);
            if a.calibrate_window.is_some() {
                cfg.portfolio.candidate_windows = a.calibrate_window.map(|l| l.0);
            }
            cfg.selection.enabled |= a.feature_selection;
            commands::backtest
        }
        Command::Sweep(a) => {
            a.data.apply(&mut cfg);
            a.model_args.apply(&mut cfg);
            a.portfolio.apply(&mut cfg);
            set(&mut cfg.sweep.n_combinations, a.combinations);
            set(&mut cfg.sweep.workers, a.workers);
            sweep::sweep
        }
        Command::Report(a) => {
            return commands::report(&a.ledgers, a.after, a.through, &out);
        }
    };
    cfg.validate()?;
    action(&cfg, &out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let CliError::Core(regime_core::Error::Aborted { date, .. }) = &e {
                eprintln!("run stopped on {date}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
