//! Performance metrics and the two backtest harnesses.
//!
//! The fixed harness manages a portfolio from each configured start date for
//! a fixed horizon and reports one metrics row per period plus an arithmetic
//! mean row. The daily-rolling harness launches a management window from
//! every trading day inside each period and reports the per-period average
//! of each metric across windows.
//!
//! Reports render as aligned text tables (strategy groups of R / Sigma /
//! MDD / Sharpe columns) and as machine-readable CSV.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::sync::Arc;

use chrono::NaiveDate;
use ndarray::Array2;
use rayon::prelude::*;
use thiserror::Error;

use crate::action_space::ActionSet;
use crate::agent::{infer, InferMode, ModelPool};
use crate::benchmarks::{equal_weights, markowitz_weights, risk_parity_weights, MomentEstimates};
use crate::linalg;
use crate::market_data::AssetPanel;
use crate::portfolio_env::{EnvConfig, HoldingsAccount, PortfolioEnv, RewardMode};
use crate::rcme::RepresentativeSet;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty series")]
    EmptySeries,
    #[error("series too short: {got} points, need {needed}")]
    TooShort { got: usize, needed: usize },
    #[error("degenerate volatility")]
    DegenerateVolatility,
    #[error("bad period: {0}")]
    BadPeriod(String),
    #[error("report format error: {0}")]
    ReportFormat(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Mean daily return annualized by 252.
pub fn annualized_return(daily: &[f64]) -> Result<f64> {
    if daily.is_empty() {
        return Err(EvalError::EmptySeries);
    }
    Ok(linalg::mean(daily) * crate::TRADING_DAYS)
}

/// Sample standard deviation annualized by sqrt(252).
pub fn annualized_volatility(daily: &[f64]) -> Result<f64> {
    if daily.len() < 2 {
        return Err(EvalError::TooShort {
            got: daily.len(),
            needed: 2,
        });
    }
    Ok(linalg::sample_std(daily) * crate::TRADING_DAYS.sqrt())
}

/// Annualized return over annualized volatility; errors when the volatility
/// is exactly zero.
pub fn sharpe(daily: &[f64]) -> Result<f64> {
    let vol = annualized_volatility(daily)?;
    if vol == 0.0 {
        return Err(EvalError::DegenerateVolatility);
    }
    Ok(annualized_return(daily)? / vol)
}

/// Maximum decline from the running peak, as a non-positive fraction.
pub fn max_drawdown(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty() && values.iter().all(|&v| v > 0.0));
    let mut peak = f64::MIN_POSITIVE;
    let mut worst = 0.0f64;
    for &v in values {
        peak = peak.max(v);
        worst = worst.min(v / peak - 1.0);
    }
    worst
}

/// Last over first minus one.
pub fn cumulative_return(values: &[f64]) -> f64 {
    debug_assert!(!values.is_empty());
    values[values.len() - 1] / values[0] - 1.0
}

/// Metrics of one management window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerformanceReport {
    pub annualized_return: f64,
    pub annualized_volatility: f64,
    /// 0 by convention when the volatility is exactly zero.
    pub sharpe: f64,
    pub mdd: f64,
    pub cumulative_return: f64,
    pub n_days: usize,
}

impl PerformanceReport {
    /// Builds the full report from a window of daily portfolio returns
    /// (value path reconstructed from 1.0).
    pub fn from_daily_returns(daily: &[f64]) -> Result<Self> {
        if daily.is_empty() {
            return Err(EvalError::EmptySeries);
        }
        let mut values = Vec::with_capacity(daily.len() + 1);
        values.push(1.0);
        let mut v = 1.0;
        for r in daily {
            v *= 1.0 + r;
            values.push(v);
        }
        let vol = annualized_volatility(daily).unwrap_or(0.0);
        let ret = annualized_return(daily)?;
        Ok(Self {
            annualized_return: ret,
            annualized_volatility: vol,
            sharpe: if vol == 0.0 { 0.0 } else { ret / vol },
            mdd: max_drawdown(&values),
            cumulative_return: cumulative_return(&values),
            n_days: daily.len(),
        })
    }

    fn mean_of(reports: &[PerformanceReport]) -> Option<Self> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        Some(Self {
            annualized_return: reports.iter().map(|r| r.annualized_return).sum::<f64>() / n,
            annualized_volatility: reports
                .iter()
                .map(|r| r.annualized_volatility)
                .sum::<f64>()
                / n,
            sharpe: reports.iter().map(|r| r.sharpe).sum::<f64>() / n,
            mdd: reports.iter().map(|r| r.mdd).sum::<f64>() / n,
            cumulative_return: reports.iter().map(|r| r.cumulative_return).sum::<f64>() / n,
            n_days: (reports.iter().map(|r| r.n_days).sum::<usize>() as f64 / n).round() as usize,
        })
    }
}

/// Experiment description: periods, horizon, and harness flavor.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    /// (start, end) date pairs. The fixed harness manages from each start;
    /// the rolling harness launches a window from every trading day in the
    /// range.
    pub periods: Vec<(NaiveDate, NaiveDate)>,
    pub management_horizon: usize,
    pub rolling: bool,
}

/// A strategy under test.
pub enum Strategy<'a> {
    EqualWeight,
    Markowitz { moment_window: usize },
    RiskParity { moment_window: usize },
    Model {
        pool: &'a ModelPool,
        representatives: &'a RepresentativeSet,
        action_set: &'a ActionSet,
    },
}

impl Strategy<'_> {
    pub fn id(&self) -> &'static str {
        match self {
            Strategy::EqualWeight => "equal_weight",
            Strategy::Markowitz { .. } => "markowitz",
            Strategy::RiskParity { .. } => "risk_budgeting",
            Strategy::Model { .. } => "model",
        }
    }

    pub fn display_name(id: &str) -> &'static str {
        match id {
            "markowitz" => "Markowitz",
            "risk_budgeting" => "Risk Budgeting",
            "equal_weight" => "Equal Weight",
            "model" => "Model",
            _ => "Unknown",
        }
    }

    /// Report column order.
    pub fn canonical_order() -> [&'static str; 4] {
        ["markowitz", "risk_budgeting", "equal_weight", "model"]
    }
}

/// Harness knobs shared by both experiment flavors.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Days between weight updates (buy-and-hold drift in between).
    pub decision_stride: usize,
    /// Collect per-window portfolio value paths into the results.
    pub collect_equity: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            decision_stride: 1,
            collect_equity: false,
        }
    }
}

/// One strategy's outcome for one period (or the mean row).
#[derive(Debug, Clone)]
pub struct StrategyResult {
    pub strategy_id: String,
    pub report: Option<PerformanceReport>,
    pub error: Option<String>,
    /// Per-window portfolio value paths when equity collection is on.
    pub equity: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct PeriodRow {
    pub period_index: usize,
    pub start: NaiveDate,
    pub end: NaiveDate,
    pub results: Vec<StrategyResult>,
}

#[derive(Debug, Clone)]
pub struct BacktestReport {
    pub strategy_ids: Vec<String>,
    pub rows: Vec<PeriodRow>,
    pub mean: Vec<StrategyResult>,
    pub rolling: bool,
    pub management_horizon: usize,
}

/// Drives one management window for one strategy over return rows
/// `start+1 ..= start+horizon`, deciding at `start` and then every stride.
/// Returns the daily portfolio returns.
fn run_window(
    strategy: &Strategy<'_>,
    returns: &Array2<f64>,
    start: usize,
    horizon: usize,
    stride: usize,
) -> std::result::Result<Vec<f64>, String> {
    let last = returns.nrows() - 1;
    if start + horizon > last {
        return Err(format!(
            "window start {start} + horizon {horizon} exceeds last return row {last}"
        ));
    }
    match strategy {
        Strategy::Model {
            pool,
            representatives,
            action_set,
        } => {
            let corr_window = representatives.window;
            let obs_window = pool.arch.obs_window;
            if start + 1 < obs_window.max(corr_window) {
                return Err(format!(
                    "window start {start} needs {} days of history",
                    obs_window.max(corr_window)
                ));
            }
            let cfg = EnvConfig {
                obs_window,
                state_window: pool.arch.state_window,
                decision_stride: stride,
                episode_horizon: horizon,
                reward_mode: RewardMode::Trailing,
                cost_bps: 0.0,
            };
            let mut env = PortfolioEnv::new(
                returns.clone(),
                Arc::new((*action_set).clone()),
                cfg,
            );
            let mut out = env.reset(start).map_err(|e| e.to_string())?;
            let mut action = 0usize;
            let mut step = 0usize;
            while !out.done {
                if step % stride == 0 {
                    let t = env.current_time();
                    let corr = crate::market_data::rolling_correlation_of(returns, t, corr_window)
                        .map_err(|e| e.to_string())?;
                    action = infer(
                        pool,
                        representatives,
                        &corr,
                        &out.observation.values,
                        &out.state,
                        InferMode::Deterministic,
                    )
                    .map_err(|e| e.to_string())?;
                }
                out = env.step(action).map_err(|e| e.to_string())?;
                step += 1;
            }
            Ok(env.episode_returns().to_vec())
        }
        _ => {
            let n = returns.ncols();
            let mut account = HoldingsAccount::new(n);
            account.rebalance(&equal_weights(n).weights, 0.0);
            let mut prs = Vec::with_capacity(horizon);
            for step in 0..horizon {
                let t = start + step;
                if step % stride == 0 {
                    let weights = match strategy {
                        Strategy::EqualWeight => equal_weights(n).weights,
                        Strategy::Markowitz { moment_window } => {
                            let m = MomentEstimates::from_trailing_returns(returns, t, *moment_window)
                                .map_err(|e| e.to_string())?;
                            markowitz_weights(&m).map_err(|e| e.to_string())?.weights
                        }
                        Strategy::RiskParity { moment_window } => {
                            let m = MomentEstimates::from_trailing_returns(returns, t, *moment_window)
                                .map_err(|e| e.to_string())?;
                            risk_parity_weights(&m).map_err(|e| e.to_string())?.weights
                        }
                        Strategy::Model { .. } => unreachable!(),
                    };
                    account.rebalance(&weights, 0.0);
                }
                prs.push(account.advance(returns.row(t + 1)));
            }
            Ok(prs)
        }
    }
}

fn value_path(prs: &[f64]) -> Vec<f64> {
    let mut values = Vec::with_capacity(prs.len() + 1);
    values.push(1.0);
    let mut v = 1.0;
    for r in prs {
        v *= 1.0 + r;
        values.push(v);
    }
    values
}

/// First return-row index whose date is at or after `d`.
fn start_index(dates: &[NaiveDate], d: NaiveDate) -> Option<usize> {
    dates.iter().position(|&x| x >= d)
}

/// Last return-row index whose date is at or before `d`.
fn end_index(dates: &[NaiveDate], d: NaiveDate) -> Option<usize> {
    dates.iter().rposition(|&x| x <= d)
}

fn run_periods(
    strategies: &[Strategy<'_>],
    panel: &AssetPanel,
    spec: &ExperimentSpec,
    opts: &RunOptions,
) -> Result<BacktestReport> {
    if spec.periods.is_empty() {
        return Err(EvalError::BadPeriod("no periods configured".into()));
    }
    if spec.management_horizon == 0 {
        return Err(EvalError::BadPeriod("zero management horizon".into()));
    }
    let rp = crate::market_data::daily_returns(panel);
    let returns = &rp.returns;
    let dates = &rp.dates;
    let stride = opts.decision_stride.max(1);
    let strategy_ids: Vec<String> = strategies.iter().map(|s| s.id().to_string()).collect();

    let mut rows = Vec::with_capacity(spec.periods.len());
    for (period_index, &(p_start, p_end)) in spec.periods.iter().enumerate() {
        let results: Vec<StrategyResult> = strategies
            .iter()
            .map(|strategy| {
                let run = || -> std::result::Result<(PerformanceReport, Vec<Vec<f64>>), String> {
                    let s_idx = start_index(dates, p_start)
                        .ok_or_else(|| format!("start date {p_start} beyond panel"))?;
                    if spec.rolling {
                        let e_idx = end_index(dates, p_end)
                            .filter(|&e| e >= s_idx)
                            .ok_or_else(|| format!("period {p_start}..{p_end} has no trading days"))?;
                        let windows: Vec<std::result::Result<Vec<f64>, String>> = (s_idx..=e_idx)
                            .collect::<Vec<_>>()
                            .into_par_iter()
                            .map(|d| run_window(strategy, returns, d, spec.management_horizon, stride))
                            .collect();
                        let mut reports = Vec::with_capacity(windows.len());
                        let mut equity = Vec::new();
                        for w in windows {
                            let prs = w?;
                            reports.push(
                                PerformanceReport::from_daily_returns(&prs)
                                    .map_err(|e| e.to_string())?,
                            );
                            if opts.collect_equity {
                                equity.push(value_path(&prs));
                            }
                        }
                        let mean = PerformanceReport::mean_of(&reports)
                            .ok_or_else(|| "no windows in period".to_string())?;
                        Ok((mean, equity))
                    } else {
                        let prs = run_window(strategy, returns, s_idx, spec.management_horizon, stride)?;
                        let report = PerformanceReport::from_daily_returns(&prs)
                            .map_err(|e| e.to_string())?;
                        let equity = if opts.collect_equity {
                            vec![value_path(&prs)]
                        } else {
                            Vec::new()
                        };
                        Ok((report, equity))
                    }
                };
                match run() {
                    Ok((report, equity)) => StrategyResult {
                        strategy_id: strategy.id().to_string(),
                        report: Some(report),
                        error: None,
                        equity,
                    },
                    Err(e) => StrategyResult {
                        strategy_id: strategy.id().to_string(),
                        report: None,
                        error: Some(e),
                        equity: Vec::new(),
                    },
                }
            })
            .collect();
        rows.push(PeriodRow {
            period_index,
            start: p_start,
            end: p_end,
            results,
        });
    }

    let mean = strategy_ids
        .iter()
        .map(|id| {
            let reports: Vec<PerformanceReport> = rows
                .iter()
                .flat_map(|row| {
                    row.results
                        .iter()
                        .filter(|r| &r.strategy_id == id)
                        .filter_map(|r| r.report)
                })
                .collect();
            StrategyResult {
                strategy_id: id.clone(),
                report: PerformanceReport::mean_of(&reports),
                error: None,
                equity: Vec::new(),
            }
        })
        .collect();

    Ok(BacktestReport {
        strategy_ids,
        rows,
        mean,
        rolling: spec.rolling,
        management_horizon: spec.management_horizon,
    })
}

/// Fixed-period harness: one management window per period start date plus a
/// mean row. Strategy failures mark the period failed rather than aborting
/// the table.
pub fn run_backtest(
    strategies: &[Strategy<'_>],
    panel: &AssetPanel,
    spec: &ExperimentSpec,
    opts: &RunOptions,
) -> Result<BacktestReport> {
    run_periods(
        strategies,
        panel,
        &ExperimentSpec {
            rolling: false,
            ..spec.clone()
        },
        opts,
    )
}

/// Daily-rolling harness: a window from every trading day in each period;
/// per-period metrics are the arithmetic means across windows.
pub fn run_daily_rolling(
    strategies: &[Strategy<'_>],
    panel: &AssetPanel,
    spec: &ExperimentSpec,
    opts: &RunOptions,
) -> Result<BacktestReport> {
    run_periods(
        strategies,
        panel,
        &ExperimentSpec {
            rolling: true,
            ..spec.clone()
        },
        opts,
    )
}

fn ordered_ids(report: &BacktestReport) -> Vec<String> {
    let mut ids: Vec<String> = Strategy::canonical_order()
        .iter()
        .filter(|id| report.strategy_ids.iter().any(|s| s == *id))
        .map(|s| s.to_string())
        .collect();
    for id in &report.strategy_ids {
        if !ids.contains(id) {
            ids.push(id.clone());
        }
    }
    ids
}

fn result_for<'a>(row: &'a [StrategyResult], id: &str) -> Option<&'a StrategyResult> {
    row.iter().find(|r| r.strategy_id == id)
}

fn metric_cells(result: Option<&StrategyResult>) -> [String; 4] {
    match result.and_then(|r| r.report.as_ref()) {
        Some(rep) => [
            format!("{:.2}%", rep.annualized_return * 100.0),
            format!("{:.2}%", rep.annualized_volatility * 100.0),
            format!("{:.2}%", rep.mdd * 100.0),
            format!("{:.2}", rep.sharpe),
        ],
        None => ["failed".into(), "-".into(), "-".into(), "-".into()],
    }
}

/// Aligned text table with one column group (R, Sigma, MDD, Sharpe) per
/// strategy and one row per period plus the mean row.
pub fn render_table(report: &BacktestReport) -> String {
    let ids = ordered_ids(report);
    let metric_headers = ["R", "Sigma", "MDD", "Sharpe"];
    let mut table: Vec<Vec<String>> = Vec::new();

    let mut header = vec!["Period".to_string()];
    for id in &ids {
        for m in metric_headers {
            header.push(format!("{} {}", Strategy::display_name(id), m));
        }
    }
    table.push(header);

    for row in &report.rows {
        let mut cells = vec![format!("({})", row.period_index + 1)];
        for id in &ids {
            cells.extend(metric_cells(result_for(&row.results, id)));
        }
        table.push(cells);
    }
    let mut cells = vec!["Mean".to_string()];
    for id in &ids {
        cells.extend(metric_cells(result_for(&report.mean, id)));
    }
    table.push(cells);

    let cols = table[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    let title = if report.rolling {
        format!(
            "Daily rolling backtest (horizon {} days)\n",
            report.management_horizon
        )
    } else {
        format!(
            "Fixed-period backtest (horizon {} days)\n",
            report.management_horizon
        )
    };
    out.push_str(&title);
    for (r, row) in table.iter().enumerate() {
        let line: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, cell)| format!("{:>width$}", cell, width = widths[c]))
            .collect();
        out.push_str(&line.join("  "));
        out.push('\n');
        if r == 0 {
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            out.push_str(&rule.join("  "));
            out.push('\n');
        }
    }
    out.push('\n');
    // period legend
    for row in &report.rows {
        out.push_str(&format!(
            "({}) {} .. {}\n",
            row.period_index + 1,
            row.start,
            row.end
        ));
    }
    out
}

const CSV_HEADER: &str = "period,start,end,strategy,annualized_return,annualized_volatility,sharpe,mdd,cumulative_return,n_days,status";

/// Machine-readable report; floats use shortest round-trip formatting.
pub fn write_csv(report: &BacktestReport, mut w: impl Write) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    let ids = ordered_ids(report);
    for row in &report.rows {
        for id in &ids {
            let result = result_for(&row.results, id);
            write_csv_row(
                &mut w,
                &format!("{}", row.period_index + 1),
                &row.start.to_string(),
                &row.end.to_string(),
                id,
                result,
            )?;
        }
    }
    for id in &ids {
        write_csv_row(&mut w, "mean", "", "", id, result_for(&report.mean, id))?;
    }
    Ok(())
}

fn write_csv_row(
    w: &mut impl Write,
    period: &str,
    start: &str,
    end: &str,
    id: &str,
    result: Option<&StrategyResult>,
) -> Result<()> {
    match result.and_then(|r| r.report.as_ref()) {
        Some(rep) => writeln!(
            w,
            "{period},{start},{end},{id},{},{},{},{},{},{},ok",
            rep.annualized_return,
            rep.annualized_volatility,
            rep.sharpe,
            rep.mdd,
            rep.cumulative_return,
            rep.n_days
        )?,
        None => {
            let msg = result
                .and_then(|r| r.error.clone())
                .unwrap_or_else(|| "missing".into())
                .replace(',', ";");
            writeln!(w, "{period},{start},{end},{id},,,,,,,failed: {msg}")?;
        }
    }
    Ok(())
}

/// Reads a report back from its CSV form (used by the `report` command to
/// re-render tables). Equity paths are not part of the CSV.
pub fn read_csv(r: impl Read, rolling: bool, horizon: usize) -> Result<BacktestReport> {
    let mut lines = BufReader::new(r).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| EvalError::ReportFormat("empty report".into()))?;
    if header.trim() != CSV_HEADER {
        return Err(EvalError::ReportFormat(format!("bad header `{header}`")));
    }
    let mut period_rows: BTreeMap<usize, PeriodRow> = BTreeMap::new();
    let mut mean: Vec<StrategyResult> = Vec::new();
    let mut strategy_ids: Vec<String> = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.splitn(11, ',').collect();
        if cells.len() != 11 {
            return Err(EvalError::ReportFormat(format!("bad row `{line}`")));
        }
        let id = cells[3].to_string();
        if !strategy_ids.contains(&id) {
            strategy_ids.push(id.clone());
        }
        let status = cells[10];
        let result = if status == "ok" {
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| EvalError::ReportFormat(format!("bad number `{s}`")))
            };
            StrategyResult {
                strategy_id: id.clone(),
                report: Some(PerformanceReport {
                    annualized_return: parse(cells[4])?,
                    annualized_volatility: parse(cells[5])?,
                    sharpe: parse(cells[6])?,
                    mdd: parse(cells[7])?,
                    cumulative_return: parse(cells[8])?,
                    n_days: cells[9]
                        .parse()
                        .map_err(|_| EvalError::ReportFormat(format!("bad n_days `{}`", cells[9])))?,
                }),
                error: None,
                equity: Vec::new(),
            }
        } else {
            StrategyResult {
                strategy_id: id.clone(),
                report: None,
                error: Some(status.to_string()),
                equity: Vec::new(),
            }
        };
        if cells[0] == "mean" {
            mean.push(result);
        } else {
            let period: usize = cells[0]
                .parse()
                .map_err(|_| EvalError::ReportFormat(format!("bad period `{}`", cells[0])))?;
            let parse_date = |s: &str| {
                NaiveDate::parse_from_str(s, "%Y-%m-%d")
                    .map_err(|_| EvalError::ReportFormat(format!("bad date `{s}`")))
            };
            let row = period_rows.entry(period - 1).or_insert_with(|| PeriodRow {
                period_index: period - 1,
                start: parse_date(cells[1]).unwrap_or_default(),
                end: parse_date(cells[2]).unwrap_or_default(),
                results: Vec::new(),
            });
            row.results.push(result);
        }
    }
    Ok(BacktestReport {
        strategy_ids,
        rows: period_rows.into_values().collect(),
        mean,
        rolling,
        management_horizon: horizon,
    })
}
