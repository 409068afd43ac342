use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use regime_core::backtest::{DaaConfig, DateSplit, FeatureSelectionConfig, RebalanceSchedule};
use regime_core::data::{generate_synthetic, ReturnPanel, SyntheticSpec};
use regime_core::fshmm::FshmmConfig;
use regime_core::ghmm::FitConfig;
use regime_core::portfolio::{PortfolioMethod, DEFAULT_MAX_WEIGHT};
use regime_core::scenarios;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_context, CliError, CliResult};

pub const OUTPUT_DIR_ENV: &str = "REGIME_OUTPUT_DIR";
const DEFAULT_OUTPUT_DIR: &str = "regime-output";

/// Declarative description of a run, read from a TOML file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    /// Master seed; every fit and sampler derives from it.
    pub seed: u64,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub split: Option<SplitConfig>,
    pub model: ModelConfig,
    pub portfolio: PortfolioConfig,
    pub selection: SelectionConfig,
    pub sweep: SweepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Allocation returns.
    pub panel: Option<PathBuf>,
    /// Regime-model inputs; defaults to `panel`.
    pub train_panel: Option<PathBuf>,
    pub date_column: String,
    pub alloc_columns: Option<Vec<String>>,
    pub train_columns: Option<Vec<String>>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            panel: None,
            train_panel: None,
            date_column: "date".into(),
            alloc_columns: None,
            train_columns: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    SaliencyBenchmark,
    SeparatedStates,
    RegimeMarket,
    RegimeMarketWithShocks,
    RegimeIndicators,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub scenario: Scenario,
    pub length: usize,
    pub n_noise: usize,
    pub separation: f64,
    /// Defaults to the master seed.
    pub seed: Option<u64>,
    /// Full generator description, used when `scenario = "custom"`.
    pub spec: Option<SyntheticSpec>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::SaliencyBenchmark,
            length: 2000,
            n_noise: 3,
            separation: 3.0,
            seed: None,
            spec: None,
        }
    }
}

impl SyntheticConfig {
    pub fn resolve(&self, master_seed: u64) -> CliResult<SyntheticSpec> {
        let seed = self.seed.unwrap_or(master_seed);
        let spec = match self.scenario {
            Scenario::SaliencyBenchmark => {
                scenarios::saliency_benchmark(self.n_noise, self.length, seed)
            }
            Scenario::SeparatedStates => {
                let mut s = scenarios::separated_states(self.separation, self.length, seed);
                s.n_noise = self.n_noise;
                s
            }
            Scenario::RegimeMarket => scenarios::regime_market(self.n_noise, self.length, seed),
            Scenario::RegimeMarketWithShocks => {
                let mut s = scenarios::regime_market_with_shocks(self.length, seed);
                s.n_noise = self.n_noise;
                s
            }
            Scenario::RegimeIndicators => {
                scenarios::regime_indicators(self.separation, self.n_noise, self.length, seed)
            }
            Scenario::Custom => self.spec.clone().ok_or_else(|| {
                CliError::Usage("scenario \"custom\" needs a [synthetic.spec] table".into())
            })?,
        };
        spec.validate()
            .map_err(|e| CliError::Usage(format!("invalid synthetic spec: {e}")))?;
        Ok(spec)
    }
}

/// Date split given either as dates or as fractions of the panel length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitConfig {
    Dates {
        train_end: NaiveDate,
        validation_end: NaiveDate,
        test_end: NaiveDate,
    },
    Fractions {
        train_fraction: f64,
        validation_fraction: f64,
    },
}

impl SplitConfig {
    pub fn resolve(&self, dates: &[NaiveDate]) -> CliResult<DateSplit> {
        let split = match *self {
            SplitConfig::Dates {
                train_end,
                validation_end,
                test_end,
            } => DateSplit {
                train_end,
                validation_end,
                test_end,
            },
            SplitConfig::Fractions {
                train_fraction,
                validation_fraction,
            } => {
                let n = dates.len();
                let at = |f: f64| -> CliResult<NaiveDate> {
                    let i = (f * n as f64).round() as usize;
                    if !(f > 0.0) || i == 0 || i >= n {
                        return Err(CliError::Usage(format!(
                            "split fraction {f} leaves an empty period"
                        )));
                    }
                    Ok(dates[i - 1])
                };
                DateSplit {
                    train_end: at(train_fraction)?,
                    validation_end: at(train_fraction + validation_fraction)?,
                    test_end: dates[n - 1],
                }
            }
        };
        split
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(split)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Hmm,
    Fshmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub states: usize,
    /// When set, `fit` chooses K among these by BIC.
    pub candidate_states: Option<Vec<usize>>,
    pub tol: f64,
    pub max_iter: usize,
    pub n_restarts: usize,
    pub cov_reg: Option<f64>,
    /// Saliency prior weight per feature as a fraction of the sample length.
    pub k_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let fit = FitConfig::default();
        Self {
            kind: ModelKind::Hmm,
            states: 2,
            candidate_states: None,
            tol: fit.tol,
            max_iter: fit.max_iter,
            n_restarts: fit.n_restarts,
            cov_reg: fit.cov_reg,
            k_scale: FeatureSelectionConfig::default().k_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PortfolioConfig {
    pub methods: Vec<PortfolioMethod>,
    pub cost_rate: f64,
    pub max_weight: f64,
    pub confirm_window: usize,
    /// Candidate confirmation windows scored on the validation period.
    pub candidate_windows: Option<Vec<usize>>,
    pub moment_span: Option<usize>,
    pub benchmark_schedule: RebalanceSchedule,
}

impl Default for PortfolioConfig {
    fn default() -> Self {
        let daa = DaaConfig::default();
        Self {
            methods: vec![daa.method],
            cost_rate: daa.cost_rate,
            max_weight: DEFAULT_MAX_WEIGHT,
            confirm_window: daa.confirm_window,
            candidate_windows: None,
            moment_span: None,
            benchmark_schedule: RebalanceSchedule::Monthly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    /// Run saliency selection before the DAA backtest.
    pub enabled: bool,
    pub threshold: f64,
    pub n_restarts: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            threshold: FshmmConfig::default().threshold,
            n_restarts: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Asset families; every combination takes one asset from each.
    pub groups: Vec<Vec<String>>,
    pub n_combinations: usize,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            groups: Vec::new(),
            n_combinations: 10,
            workers: 1,
        }
    }
}

impl RunConfig {
    /// Reads a TOML config, or the `config` entry of a JSON run manifest.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = io_context(std::fs::read_to_string(path), || {
            format!("reading {}", path.display())
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            #[derive(Deserialize)]
            struct Manifest {
                config: RunConfig,
            }
            let m: Manifest = serde_json::from_str(&text).map_err(|e| {
                CliError::Usage(format!("{}: not a run manifest: {e}", path.display()))
            })?;
            return Ok(m.config);
        }
        Ok(toml::from_str(&text)?)
    }

    pub fn validate(&self) -> CliResult<()> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.model.states == 0 {
            return usage("number of states must be at least 1".into());
        }
        if let Some(c) = &self.model.candidate_states {
            if c.is_empty() || c.contains(&0) {
                return usage("candidate_states must be non-empty and positive".into());
            }
        }
        if self.model.n_restarts == 0 || self.model.max_iter == 0 {
            return usage("n_restarts and max_iter must be positive".into());
        }
        if !(self.model.tol > 0.0) {
            return usage(format!("tolerance {} must be positive", self.model.tol));
        }
        if !(self.model.k_scale >= 0.0) {
            return usage(format!(
                "k_scale {} must be non-negative",
                self.model.k_scale
            ));
        }
        if self.portfolio.methods.is_empty() {
            return usage("at least one portfolio method is required".into());
        }
        if !(self.portfolio.cost_rate >= 0.0) {
            return usage(format!(
                "cost_rate {} must be non-negative",
                self.portfolio.cost_rate
            ));
        }
        if !(self.portfolio.max_weight > 0.0 && self.portfolio.max_weight <= 1.0) {
            return usage(format!(
                "max_weight {} must lie in (0, 1]",
                self.portfolio.max_weight
            ));
        }
        if self.portfolio.confirm_window == 0 {
            return usage("confirm_window must be at least 1".into());
        }
        if let Some(c) = &self.portfolio.candidate_windows {
            if c.is_empty() || c.contains(&0) {
                return usage("candidate_windows must be non-empty and positive".into());
            }
        }
        if !(self.selection.threshold > 0.0 && self.selection.threshold < 1.0) {
            return usage(format!(
                "selection threshold {} must lie in (0, 1)",
                self.selection.threshold
            ));
        }
        if self.sweep.workers == 0 {
            return usage("sweep workers must be at least 1".into());
        }
        for p in [&self.data.panel, &self.data.train_panel]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return usage(format!("input file {} does not exist", p.display()));
            }
        }
        Ok(())
    }

    /// Flag, then config file, then environment, then the built-in default.
    pub fn output_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn fit_config(&self) -> FitConfig {
        FitConfig {
            tol: self.model.tol,
            max_iter: self.model.max_iter,
            n_restarts: self.model.n_restarts,
            cov_reg: self.model.cov_reg,
            seed: self.seed,
        }
    }

    pub fn fshmm_config(&self, n_restarts: usize) -> FshmmConfig {
        FshmmConfig {
            tol: self.model.tol,
            max_iter: self.model.max_iter,
            n_restarts,
            seed: self.seed,
            threshold: self.selection.threshold,
        }
    }

    pub fn feature_selection(&self) -> FeatureSelectionConfig {
        FeatureSelectionConfig {
            k_scale: self.model.k_scale,
            threshold: self.selection.threshold,
            fshmm: self.fshmm_config(self.selection.n_restarts),
        }
    }

    pub fn daa_config(&self, method: PortfolioMethod, confirm_window: usize) -> DaaConfig {
        DaaConfig {
            n_states: self.model.states,
            confirm_window,
            cost_rate: self.portfolio.cost_rate,
            method,
            max_weight: self.portfolio.max_weight,
            moment_span: self.portfolio.moment_span,
            fit: self.fit_config(),
        }
    }

    pub fn split(&self, panel: &ReturnPanel) -> CliResult<DateSplit> {
        self.split
            .as_ref()
            .ok_or_else(|| CliError::Usage("this command needs a [split] section".into()))?
            .resolve(panel.dates())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> CliResult<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Input panels with their provenance.
pub struct Inputs {
    pub alloc: ReturnPanel,
    pub train: ReturnPanel,
    pub files: Vec<InputFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFile {
    pub path: PathBuf,
    pub sha256: String,
    pub dropped_rows: usize,
}

fn read_panel(path: &Path, date_column: &str) -> CliResult<(ReturnPanel, InputFile)> {
    let bytes = io_context(std::fs::read(path), || {
        format!("reading {}", path.display())
    })?;
    let loaded = regime_core::data::read_csv(bytes.as_slice(), date_column)?;
    if loaded.dropped_rows > 0 {
        log::warn!(
            "{}: dropped {} rows with missing values",
            path.display(),
            loaded.dropped_rows
        );
    }
    let file = InputFile {
        path: path.to_path_buf(),
        sha256: sha256_hex(&bytes),
        dropped_rows: loaded.dropped_rows,
    };
    Ok((loaded.panel, file))
}

fn pick(panel: ReturnPanel, columns: &Option<Vec<String>>) -> CliResult<ReturnPanel> {
    match columns {
        Some(c) => Ok(panel.select_assets(c)?),
        None => Ok(panel),
    }
}

impl RunConfig {
    /// Loads the allocation and training panels. Without input files the
    /// configured synthetic scenario is generated in memory.
    pub fn inputs(&self) -> CliResult<Inputs> {
        let mut files = Vec::new();
        let alloc_raw = match &self.data.panel {
            Some(p) => {
                let (panel, f) = read_panel(p, &self.data.date_column)?;
                files.push(f);
                panel
            }
            None => generate_synthetic(&self.synthetic.resolve(self.seed)?)?.0,
        };
        let train_raw = match &self.data.train_panel {
            Some(p) => {
                let (panel, f) = read_panel(p, &self.data.date_column)?;
                files.push(f);
                panel
            }
            None => alloc_raw.clone(),
        };
        Ok(Inputs {
            alloc: pick(alloc_raw, &self.data.alloc_columns)?,
            train: pick(train_raw, &self.data.train_columns)?,
            files,
        })
    }
}

/// Parses `1..30` (inclusive) or a comma-separated list.
pub fn parse_windows(s: &str) -> Result<Vec<usize>, String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("'{t}': {e}"));
    let out = if let Some((a, b)) = s.split_once("..") {
        let (a, b) = (parse(a)?, parse(b.trim_start_matches('='))?);
        if a > b {
            return Err(format!("empty range {s}"));
        }
        (a..=b).collect()
    } else {
        s.split(',').map(parse).collect::<Result<Vec<_>, _>>()?
    };
    if out.is_empty() || out.contains(&0) {
        return Err(format!("windows must be positive: {s}"));
    }
    Ok(out)
}
