use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regime_core::backtest::*;
use regime_core::data::ReturnPanel;
use regime_core::metrics::{compute_report, PerformanceReport, CSV_HEADER};
use regime_core::portfolio::PortfolioMethod;
use serde::{Deserialize, Serialize};

use crate::commands::{create_dir, create_file, write_json};
use crate::config::{InputFile, RunConfig};
use crate::error::{io_context, CliError, CliResult};

/// One asset index per group.
pub type Combination = Vec<usize>;

/// All combinations when there are at most `n`, otherwise `n` distinct
/// random draws in draw order.
pub fn combinations(sizes: &[usize], n: usize, seed: u64) -> Vec<Combination> {
    let total = sizes.iter().try_fold(1usize, |acc, &s| acc.checked_mul(s));
    if total.is_some_and(|t| t <= n) {
        let mut out = vec![Vec::new()];
        for &s in sizes {
            out = out
                .into_iter()
                .flat_map(|c| {
                    (0..s).map(move |i| {
                        let mut c = c.clone();
                        c.push(i);
                        c
                    })
                })
                .collect();
        }
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c: Combination = sizes.iter().map(|&s| rng.random_range(0..s)).collect();
        if seen.insert(c.clone()) {
            out.push(c);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub combination: usize,
    pub assets: Vec<String>,
    pub method: PortfolioMethod,
    pub variant: &'static str,
    pub confirm_window: Option<usize>,
    pub outcome: Result<PerformanceReport, String>,
}

fn test_report(ledger: &BacktestLedger, split: &DateSplit) -> Result<PerformanceReport, String> {
    let r: Vec<f64> = ledger
        .between(split.validation_end, split.test_end)
        .iter()
        .map(|row| row.net_return)
        .collect();
    compute_report(&r).map_err(|e| e.to_string())
}

fn run_combination(
    cfg: &RunConfig,
    panel: &ReturnPanel,
    split: &DateSplit,
    index: usize,
    assets: &[String],
) -> Vec<SweepRow> {
    let methods = &cfg.portfolio.methods;
    let row = |method, variant, confirm_window, outcome| SweepRow {
        combination: index,
        assets: assets.to_vec(),
        method,
        variant,
        confirm_window,
        outcome,
    };
    let alloc = match panel.select_assets(assets) {
        Ok(p) => p,
        Err(e) => {
            return methods
                .iter()
                .flat_map(|&m| {
                    ["daa", "benchmark", "equal_weight"]
                        .map(|v| row(m, v, None, Err(e.to_string())))
                })
                .collect()
        }
    };
    let base = cfg.daa_config(methods[0], cfg.portfolio.confirm_window);
    let signal = RegimeSignal::generate(&alloc, &alloc, &base, split.train_end, split.test_end)
        .map_err(|e| e.to_string())
        .and_then(|s| match &s.failure {
            Some(msg) => Err(msg.clone()),
            None => Ok(s),
        });
    let bench = |method| {
        run_benchmark(
            &alloc,
            method,
            cfg.portfolio.cost_rate,
            cfg.portfolio.max_weight,
            split.train_end,
            split.test_end,
            cfg.portfolio.benchmark_schedule,
        )
        .map_err(|e| e.to_string())
        .and_then(|l| test_report(&l, split))
    };
    let equal = bench(PortfolioMethod::EqualWeight);
    let mut rows = Vec::with_capacity(3 * methods.len());
    for &method in methods {
        let daa = signal.as_ref().map_err(Clone::clone).and_then(|s| {
            let mut rule = cfg.daa_config(method, cfg.portfolio.confirm_window).rule();
            if let Some(c) = &cfg.portfolio.candidate_windows {
                let n_val = s.days_through(split.validation_end);
                rule.confirm_window = calibrate_on_signal(s, &alloc, &rule, c, n_val)
                    .map_err(|e| e.to_string())?
                    .best_window;
            }
            let ledger = s
                .replay(&alloc, &rule, s.len())
                .map_err(|e| e.to_string())?;
            Ok((rule.confirm_window, test_report(&ledger, split)?))
        });
        match daa {
            Ok((d, r)) => rows.push(row(method, "daa", Some(d), Ok(r))),
            Err(e) => rows.push(row(method, "daa", None, Err(e))),
        }
        rows.push(row(method, "benchmark", None, bench(method)));
        rows.push(row(method, "equal_weight", None, equal.clone()));
    }
    rows
}

fn resolve_groups(cfg: &RunConfig, panel: &ReturnPanel) -> CliResult<Vec<Vec<String>>> {
    if !cfg.sweep.groups.is_empty() {
        if cfg.sweep.groups.iter().any(Vec::is_empty) {
            return Err(CliError::Usage("sweep groups must not be empty".into()));
        }
        return Ok(cfg.sweep.groups.clone());
    }
    // without explicit families every asset is its own group
    Ok(panel.assets().iter().map(|a| vec![a.clone()]).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SweepManifest {
    command: String,
    version: String,
    config_hash: String,
    config: RunConfig,
    master_seed: u64,
    inputs: Vec<InputFile>,
    split: DateSplit,
    combinations: Vec<Vec<String>>,
    n_rows: usize,
    n_failed: usize,
}

pub const SWEEP_KEYS: [&str; 6] = [
    "combination",
    "assets",
    "method",
    "variant",
    "confirm_window",
    "status",
];

pub fn sweep(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    let inputs = cfg.inputs()?;
    let panel = &inputs.alloc;
    let split = cfg.split(panel)?;
    let groups = resolve_groups(cfg, panel)?;
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let combos: Vec<Vec<String>> = combinations(&sizes, cfg.sweep.n_combinations, cfg.seed)
        .into_iter()
        .map(|c| c.iter().zip(&groups).map(|(&i, g)| g[i].clone()).collect())
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.sweep.workers)
        .build()
        .map_err(|e| CliError::Usage(format!("cannot start {} workers: {e}", cfg.sweep.workers)))?;
    let rows: Vec<SweepRow> = pool.install(|| {
        combos
            .par_iter()
            .enumerate()
            .map(|(i, assets)| run_combination(cfg, panel, &split, i, assets))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    });

    create_dir(out)?;
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_writer(create_file(&path)?);
    w.write_record(SWEEP_KEYS.iter().chain(CSV_HEADER.iter()))?;
    let mut n_failed = 0;
    for r in &rows {
        let mut rec = vec![
            r.combination.to_string(),
            r.assets.join(";"),
            r.method.to_string(),
            r.variant.to_string(),
            r.confirm_window.map_or_else(String::new, |d| d.to_string()),
        ];
        match &r.outcome {
            Ok(rep) => {
                rec.push("ok".into());
                rec.extend(rep.csv_values());
            }
            Err(e) => {
                n_failed += 1;
                log::warn!(
                    "combination {} {} {}: {e}",
                    r.combination,
                    r.method,
                    r.variant
                );
                rec.push(format!("error: {e}"));
                rec.extend(std::iter::repeat_n(String::new(), CSV_HEADER.len()));
            }
        }
        w.write_record(&rec)?;
    }
    io_context(w.flush(), || format!("writing {}", path.display()))?;
    println!(
        "wrote {} ({} rows, {n_failed} failed)",
        path.display(),
        rows.len()
    );

    let manifest = SweepManifest {
        command: "sweep".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.hash()?,
        config: cfg.clone(),
        master_seed: cfg.seed,
        inputs: inputs.files,
        split,
        combinations: combos,
        n_rows: rows.len(),
        n_failed,
    };
    let path = out.join("sweep_manifest.json");
    write_json(&path, &manifest)?;
    println!("wrote {}", path.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_grids_are_enumerated() {
        let c = combinations(&[2, 3], 10, 0);
        assert_eq!(c.len(), 6);
        assert_eq!(c[0], vec![0, 0]);
        assert_eq!(c[5], vec![1, 2]);
    }

    #[test]
    fn large_grids_are_sampled_without_repeats() {
        let c = combinations(&[5; 5], 40, 3);
        assert_eq!(c.len(), 40);
        assert_eq!(c.iter().collect::<BTreeSet<_>>().len(), 40);
        assert!(c.iter().all(|x| x.len() == 5 && x.iter().all(|i| *i < 5)));
        assert_eq!(c, combinations(&[5; 5], 40, 3));
    }
}
