//! Portfolio management environment for the allocation agent.
//!
//! One step advances the market a day: the chosen action's weight vector is
//! applied on decision-stride boundaries (held buy-and-hold in between), the
//! portfolio return `pr_t = sum_i w_i r_{t,i}` compounds the portfolio value,
//! and the agent observes the trailing asset-return matrix, the trailing
//! portfolio-return vector, and a Sharpe-ratio reward.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1};
use thiserror::Error;

use crate::action_space::ActionSet;
use crate::linalg;
use crate::market_data::{MarketDataError, ReturnMatrix};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode already finished")]
    EpisodeFinished,
    #[error("invalid action index {index}, action set has {len}")]
    InvalidActionIndex { index: usize, len: usize },
    #[error("degenerate volatility: zero-variance return window")]
    DegenerateVolatility,
    #[error(transparent)]
    MarketData(#[from] MarketDataError),
}

pub type Result<T> = std::result::Result<T, EnvError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardMode {
    /// Annualized Sharpe of the trailing state window, every step.
    Trailing,
    /// Zero until done; whole-episode Sharpe emitted once.
    Terminal,
}

#[derive(Debug, Clone)]
pub struct EnvConfig {
    pub obs_window: usize,
    pub state_window: usize,
    /// Days between new action applications; weights drift buy-and-hold
    /// between boundaries.
    pub decision_stride: usize,
    pub episode_horizon: usize,
    pub reward_mode: RewardMode,
    /// Cost per unit turnover in basis points, charged on rebalancing.
    pub cost_bps: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            obs_window: 60,
            state_window: 120,
            decision_stride: 1,
            episode_horizon: 252,
            reward_mode: RewardMode::Trailing,
            cost_bps: 0.0,
        }
    }
}

/// What the agent sees after reset or a step.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// n x obs_window trailing asset returns ending at the current day.
    pub observation: ReturnMatrix,
    /// Trailing state_window portfolio returns, zero-filled before the
    /// episode start.
    pub state: Array1<f64>,
    pub reward: f64,
    pub done: bool,
}

/// Position-level accounting shared by the environment and the backtest
/// driver: rebalancing sets positions to `value * w`, advancing a day
/// applies asset returns position by position.
#[derive(Debug, Clone)]
pub struct HoldingsAccount {
    pub positions: Vec<f64>,
    pub value: f64,
}

impl HoldingsAccount {
    pub fn new(n: usize) -> Self {
        Self {
            positions: vec![0.0; n],
            value: 1.0,
        }
    }

    /// Sets positions to the target weights, charging `cost_bps` per unit of
    /// turnover when non-zero.
    pub fn rebalance(&mut self, weights: &[f64], cost_bps: f64) {
        debug_assert_eq!(weights.len(), self.positions.len());
        if cost_bps > 0.0 {
            let turnover: f64 = weights
                .iter()
                .zip(&self.positions)
                .map(|(w, p)| (w * self.value - p).abs())
                .sum();
            self.value -= cost_bps / 1e4 * turnover;
        }
        for (p, w) in self.positions.iter_mut().zip(weights) {
            *p = self.value * w;
        }
    }

    /// Applies one day of asset returns; returns the portfolio daily return.
    pub fn advance(&mut self, returns_row: ArrayView1<'_, f64>) -> f64 {
        let mut gain = 0.0;
        for (p, r) in self.positions.iter_mut().zip(returns_row.iter()) {
            gain += *p * *r;
            *p *= 1.0 + *r;
        }
        let pr = gain / self.value;
        self.value += gain;
        pr
    }
}

/// Annualized Sharpe ratio of a daily return window:
/// `(mean * 252) / (sample std * sqrt(252))`.
pub fn trailing_sharpe(pr_window: &[f64]) -> Result<f64> {
    if pr_window.len() < 2 {
        return Err(EnvError::DegenerateVolatility);
    }
    let mu = linalg::mean(pr_window) * crate::TRADING_DAYS;
    let sigma = linalg::sample_std(pr_window) * crate::TRADING_DAYS.sqrt();
    if sigma == 0.0 {
        return Err(EnvError::DegenerateVolatility);
    }
    Ok(mu / sigma)
}

/// One row of the optional step trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub t: usize,
    pub action: usize,
    pub weights: Vec<f64>,
    pub pr: f64,
    pub value: f64,
    pub reward: f64,
}

/// The environment. Single-caller; run many instances for parallelism.
#[derive(Debug, Clone)]
pub struct PortfolioEnv {
    returns: Array2<f64>,
    action_set: Arc<ActionSet>,
    cfg: EnvConfig,
    t: usize,
    start: usize,
    account: HoldingsAccount,
    /// Portfolio returns since episode start.
    episode_prs: Vec<f64>,
    done: bool,
    started: bool,
    degenerate_rewards: usize,
    trace: Option<Vec<TraceRow>>,
}

impl PortfolioEnv {
    /// Builds an environment over a raw daily-return matrix (rows = days).
    pub fn new(returns: Array2<f64>, action_set: Arc<ActionSet>, cfg: EnvConfig) -> Self {
        debug_assert_eq!(returns.ncols(), action_set.n_assets);
        Self {
            returns,
            action_set,
            cfg,
            t: 0,
            start: 0,
            account: HoldingsAccount::new(0),
            episode_prs: Vec::new(),
            done: true,
            started: false,
            degenerate_rewards: 0,
            trace: None,
        }
    }

    pub fn n_assets(&self) -> usize {
        self.returns.ncols()
    }

    pub fn action_count(&self) -> usize {
        self.action_set.len()
    }

    pub fn action_set(&self) -> &ActionSet {
        &self.action_set
    }

    pub fn current_time(&self) -> usize {
        self.t
    }

    pub fn portfolio_value(&self) -> f64 {
        self.account.value
    }

    pub fn episode_returns(&self) -> &[f64] {
        &self.episode_prs
    }

    /// Count of steps whose Sharpe reward degenerated to zero volatility.
    pub fn degenerate_reward_count(&self) -> usize {
        self.degenerate_rewards
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn trace(&self) -> Option<&[TraceRow]> {
        self.trace.as_deref()
    }

    /// Writes the step trace as delimited rows `t,action,w_0..w_{n-1},pr,value,reward`.
    pub fn write_trace(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        let n = self.n_assets();
        let mut header = vec!["t".to_string(), "action".to_string()];
        header.extend((0..n).map(|i| format!("w_{i}")));
        header.extend(["pr", "value", "reward"].map(String::from));
        writeln!(w, "{}", header.join(","))?;
        for row in self.trace.as_deref().unwrap_or(&[]) {
            let mut cells = vec![row.t.to_string(), row.action.to_string()];
            cells.extend(row.weights.iter().map(|x| x.to_string()));
            cells.push(row.pr.to_string());
            cells.push(row.value.to_string());
            cells.push(row.reward.to_string());
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    }

    fn last_index(&self) -> usize {
        self.returns.nrows() - 1
    }

    fn observation(&self) -> Result<ReturnMatrix> {
        Ok(crate::market_data::return_matrix_with_window(
            &self.returns,
            self.t,
            self.cfg.obs_window,
        )?)
    }

    /// Trailing state_window portfolio returns, zero-filled before the start.
    fn state_vector(&self) -> Array1<f64> {
        let w = self.cfg.state_window;
        let mut out = Array1::<f64>::zeros(w);
        let have = self.episode_prs.len().min(w);
        for (k, &pr) in self.episode_prs[self.episode_prs.len() - have..]
            .iter()
            .enumerate()
        {
            out[w - have + k] = pr;
        }
        out
    }

    fn reward(&mut self, done: bool) -> f64 {
        match self.cfg.reward_mode {
            RewardMode::Trailing => {
                let state = self.state_vector();
                match trailing_sharpe(state.as_slice().expect("contiguous")) {
                    Ok(s) => s,
                    Err(_) => {
                        self.degenerate_rewards += 1;
                        0.0
                    }
                }
            }
            RewardMode::Terminal => {
                if done {
                    match trailing_sharpe(&self.episode_prs) {
                        Ok(s) => s,
                        Err(_) => {
                            self.degenerate_rewards += 1;
                            0.0
                        }
                    }
                } else {
                    0.0
                }
            }
        }
    }

    /// Starts an episode at return-row `start`: equal weights, unit value,
    /// zero-filled portfolio history, reward 0.
    pub fn reset(&mut self, start: usize) -> Result<StepOutput> {
        if start + 1 < self.cfg.obs_window || start > self.last_index() {
            return Err(EnvError::MarketData(MarketDataError::InsufficientHistory {
                t: start,
                needed: self.cfg.obs_window,
            }));
        }
        self.t = start;
        self.start = start;
        let n = self.n_assets();
        self.account = HoldingsAccount::new(n);
        self.account.rebalance(&vec![1.0 / n as f64; n], 0.0);
        self.episode_prs.clear();
        self.done = start >= self.last_index();
        self.started = true;
        self.degenerate_rewards = 0;
        if let Some(trace) = &mut self.trace {
            trace.clear();
        }
        Ok(StepOutput {
            observation: self.observation()?,
            state: self.state_vector(),
            reward: 0.0,
            done: self.done,
        })
    }

    /// Advances one day under the chosen action.
    pub fn step(&mut self, action: usize) -> Result<StepOutput> {
        if self.done || !self.started {
            return Err(EnvError::EpisodeFinished);
        }
        if action >= self.action_set.len() {
            return Err(EnvError::InvalidActionIndex {
                index: action,
                len: self.action_set.len(),
            });
        }
        if (self.t - self.start) % self.cfg.decision_stride == 0 {
            let weights = self.action_set.actions[action].fractions();
            self.account.rebalance(&weights, self.cfg.cost_bps);
        }
        let pr = self.account.advance(self.returns.row(self.t + 1));
        self.t += 1;
        self.episode_prs.push(pr);
        let done = (self.t - self.start) >= self.cfg.episode_horizon || self.t >= self.last_index();
        self.done = done;
        let reward = self.reward(done);
        if let Some(trace) = &mut self.trace {
            let value = self.account.value;
            let weights = self
                .account
                .positions
                .iter()
                .map(|p| p / value)
                .collect();
            trace.push(TraceRow {
                t: self.t,
                action,
                weights,
                pr,
                value,
                reward,
            });
        }
        Ok(StepOutput {
            observation: self.observation()?,
            state: self.state_vector(),
            reward,
            done,
        })
    }
}
