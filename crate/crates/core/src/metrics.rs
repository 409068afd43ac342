//! Performance statistics of a daily return series.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRADING_DAYS: usize = 252;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub ann_return: f64,
    pub ann_vol: f64,
    /// Annualised return over annualised volatility; zero when flat.
    pub ir: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub downside_risk: f64,
    pub sortino: f64,
    /// Worst fractional decline of compounded wealth from its running peak.
    pub max_drawdown: f64,
    pub drawdown_days: usize,
}

pub const CSV_HEADER: [&str; 9] = [
    "ann_return",
    "ann_vol",
    "ir",
    "skewness",
    "excess_kurtosis",
    "downside_risk",
    "sortino",
    "max_drawdown",
    "drawdown_days",
];

impl PerformanceReport {
    pub fn csv_values(&self) -> [String; 9] {
        [
            self.ann_return.to_string(),
            self.ann_vol.to_string(),
            self.ir.to_string(),
            self.skewness.to_string(),
            self.excess_kurtosis.to_string(),
            self.downside_risk.to_string(),
            self.sortino.to_string(),
            self.max_drawdown.to_string(),
            self.drawdown_days.to_string(),
        ]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header plus one data row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CSV_HEADER)?;
        w.write_record(self.csv_values())?;
        w.flush()?;
        Ok(())
    }
}

pub fn compute_report(returns: &[f64]) -> Result<PerformanceReport> {
    compute_report_with(returns, TRADING_DAYS, 0.0)
}

/// Report with an explicit annualisation factor and downside threshold.
pub fn compute_report_with(
    returns: &[f64],
    periods_per_year: usize,
    threshold: f64,
) -> Result<PerformanceReport> {
    let n = returns.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "{n} returns; at least 2 required"
        )));
    }
    if returns.iter().any(|r| !r.is_finite()) {
        return Err(Error::Parameter("returns contain non-finite values".into()));
    }
    let p = periods_per_year as f64;
    let nf = n as f64;
    let mean = returns.iter().sum::<f64>() / nf;
    let dev: Vec<f64> = returns.iter().map(|r| r - mean).collect();
    let m2 = dev.iter().map(|d| d * d).sum::<f64>() / nf;
    let m3 = dev.iter().map(|d| d.powi(3)).sum::<f64>() / nf;
    let m4 = dev.iter().map(|d| d.powi(4)).sum::<f64>() / nf;
    let sample_var = m2 * nf / (nf - 1.0);

    let ann_return = mean * p;
    // treat rounding noise on a constant series as zero dispersion
    let flat = m2.sqrt() <= 1e-14 * mean.abs().max(f64::MIN_POSITIVE);
    let ann_vol = if flat {
        0.0
    } else {
        sample_var.sqrt() * p.sqrt()
    };
    let (skewness, excess_kurtosis) = if flat {
        (0.0, 0.0)
    } else {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    };
    let downside_risk = (returns
        .iter()
        .map(|r| (r - threshold).min(0.0).powi(2))
        .sum::<f64>()
        / nf)
        .sqrt()
        * p.sqrt();

    let mut wealth = 1.0;
    let mut peak = 1.0_f64;
    let mut max_drawdown = 0.0_f64;
    let mut run = 0;
    let mut longest = 0;
    for r in returns {
        wealth *= 1.0 + r;
        if wealth >= peak {
            peak = wealth;
            run = 0;
        } else {
            run += 1;
            longest = longest.max(run);
            max_drawdown = max_drawdown.min(wealth / peak - 1.0);
        }
    }

    Ok(PerformanceReport {
        ann_return,
        ann_vol,
        ir: if ann_vol > 0.0 {
            ann_return / ann_vol
        } else {
            0.0
        },
        skewness,
        excess_kurtosis,
        downside_risk,
        sortino: if downside_risk > 0.0 {
            ann_return / downside_risk
        } else {
            0.0
        },
        max_drawdown,
        drawdown_days: longest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_series() {
        let r = compute_report(&[0.0004; 252]).unwrap();
        assert!((r.ann_return - 0.1008).abs() < 1e-12);
        assert_eq!(r.ann_vol, 0.0);
        assert_eq!(r.max_drawdown, 0.0);
        assert_eq!(r.drawdown_days, 0);
    }

    #[test]
    fn two_step_drawdown() {
        let r = compute_report(&[0.1, -0.1]).unwrap();
        assert!((r.max_drawdown + 0.1).abs() < 1e-12);
        assert_eq!(r.drawdown_days, 1);
    }

    #[test]
    fn too_short() {
        assert!(matches!(
            compute_report(&[0.01]),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn csv_has_one_row() {
        let r = compute_report(&[0.01, -0.02, 0.03]).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.starts_with("ann_return,ann_vol,ir"));
    }
}
