//! Regime-switching dynamic asset allocation.
//!
//! Gaussian and feature-saliency hidden Markov models detect market regimes;
//! regime-conditional portfolios are rebalanced by a daily backtesting engine
//! that charges transaction costs on turnover.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod backtest;
pub mod data;
pub mod error;
pub mod fshmm;
pub mod ghmm;
pub mod inference;
pub mod metrics;
pub mod portfolio;
pub mod scenarios;

pub use error::{Error, Result};
