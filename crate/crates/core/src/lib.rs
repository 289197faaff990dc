//! Monte Carlo portfolio manager core.
//!
//! The pipeline has three stages:
//!
//! 1. **Regime analysis** — [`market_data`] loads and aligns daily price
//!    panels; [`rcme`] rolls correlation matrices over the history, clusters
//!    them by Frobenius distance, and emits one representative correlation
//!    matrix per regime.
//! 2. **Training** — [`simulator`] generates correlated geometric Brownian
//!    motion markets per representative matrix; [`action_space`] extracts the
//!    discrete allocation actions; [`agent`] trains a pool of convolutional
//!    actor-critic models on the simulated markets via [`portfolio_env`].
//! 3. **Evaluation** — [`benchmarks`] provides the classical allocators
//!    (Markowitz tangency, risk parity, equal weight); [`evaluation`] runs
//!    fixed-period and daily-rolling backtests and renders report tables.

pub mod action_space;
pub mod agent;
pub mod benchmarks;
pub mod evaluation;
mod linalg;
pub mod market_data;
pub mod portfolio_env;
pub mod rcme;
pub mod simulator;

pub use market_data::{AssetPanel, CorrelationMatrix, ReturnMatrix, ReturnPanel};
pub use rcme::RepresentativeSet;

/// Trading days per year used for every annualization in the crate.
pub const TRADING_DAYS: f64 = 252.0;
