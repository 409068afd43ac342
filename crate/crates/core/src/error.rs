use thiserror::Error;

/// Errors raised by the estimation, allocation and backtesting routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("pipeline error: {0}")]
    Pipeline(String),

    /// A backtest stopped early; the ledger up to the failure is kept.
    #[error("backtest aborted on {date}: {source}")]
    Aborted {
        date: String,
        source: Box<Error>,
        partial: Box<crate::backtest::BacktestLedger>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
