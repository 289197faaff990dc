//! Daily price panels, return series, and rolling correlation matrices.
//!
//! Input files are delimiter-separated values with a header row, one ISO-8601
//! date column and one close-price column per asset. Rows where any asset is
//! missing a price are dropped for all assets (inner join), so the aligned
//! panel has no holes.

use std::path::Path;

use chrono::{Datelike, NaiveDate};
use ndarray::Array2;
use thiserror::Error;

use crate::linalg;

/// Minimum aligned history length: one correlation window plus one state
/// window plus a day of headroom.
pub const MIN_HISTORY: usize = 121;

/// Observation window length in trading days.
pub const OBS_WINDOW: usize = 60;

#[derive(Debug, Error)]
pub enum MarketDataError {
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error("non-positive price {price} for asset {asset} on {date}")]
    NonPositivePrice {
        asset: String,
        date: NaiveDate,
        price: f64,
    },
    #[error("too few assets: {0} price column(s), need at least 2")]
    TooFewAssets(usize),
    #[error("too short history: {0} aligned rows, need at least {1}")]
    TooShortHistory(usize, usize),
    #[error("insufficient history: t={t} needs at least {needed} observations")]
    InsufficientHistory { t: usize, needed: usize },
    #[error("zero-variance asset {asset} in window ending at t={t}")]
    ZeroVarianceAsset { asset: usize, t: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MarketDataError>;

/// Column mapping for [`load_price_panel`].
#[derive(Debug, Clone)]
pub struct PanelSchema {
    pub date_column: String,
    /// Close-price columns; the column header doubles as the asset id.
    pub price_columns: Vec<String>,
    pub delimiter: u8,
}

impl PanelSchema {
    pub fn new(date_column: impl Into<String>, price_columns: Vec<String>) -> Self {
        Self {
            date_column: date_column.into(),
            price_columns,
            delimiter: b',',
        }
    }

    pub fn with_delimiter(mut self, delimiter: u8) -> Self {
        self.delimiter = delimiter;
        self
    }
}

/// Aligned daily close prices for `n` assets over `T` days.
#[derive(Debug, Clone)]
pub struct AssetPanel {
    pub dates: Vec<NaiveDate>,
    pub asset_ids: Vec<String>,
    /// T x n, strictly positive.
    pub prices: Array2<f64>,
}

impl AssetPanel {
    /// Validates the panel invariants: strictly increasing dates, positive
    /// prices, n >= 2, T >= [`MIN_HISTORY`].
    pub fn new(dates: Vec<NaiveDate>, asset_ids: Vec<String>, prices: Array2<f64>) -> Result<Self> {
        if asset_ids.len() < 2 {
            return Err(MarketDataError::TooFewAssets(asset_ids.len()));
        }
        if dates.len() < MIN_HISTORY {
            return Err(MarketDataError::TooShortHistory(dates.len(), MIN_HISTORY));
        }
        if prices.nrows() != dates.len() || prices.ncols() != asset_ids.len() {
            return Err(MarketDataError::MalformedFile(format!(
                "price matrix {}x{} does not match {} dates x {} assets",
                prices.nrows(),
                prices.ncols(),
                dates.len(),
                asset_ids.len()
            )));
        }
        for w in dates.windows(2) {
            if w[1] <= w[0] {
                return Err(MarketDataError::MalformedFile(format!(
                    "dates not strictly increasing at {}",
                    w[1]
                )));
            }
        }
        for (t, row) in prices.outer_iter().enumerate() {
            for (i, &p) in row.iter().enumerate() {
                if !(p > 0.0) {
                    return Err(MarketDataError::NonPositivePrice {
                        asset: asset_ids[i].clone(),
                        date: dates[t],
                        price: p,
                    });
                }
            }
        }
        Ok(Self {
            dates,
            asset_ids,
            prices,
        })
    }

    pub fn n_assets(&self) -> usize {
        self.asset_ids.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }
}

/// Simple daily returns aligned with the source panel: row `t` is the return
/// from price row `t` to `t+1`.
#[derive(Debug, Clone)]
pub struct ReturnPanel {
    /// Date of each return row (the later of the two prices).
    pub dates: Vec<NaiveDate>,
    /// (T-1) x n.
    pub returns: Array2<f64>,
}

impl ReturnPanel {
    /// Builds from raw returns; every entry must exceed -1.
    pub fn from_returns(dates: Vec<NaiveDate>, returns: Array2<f64>) -> Result<Self> {
        if dates.len() != returns.nrows() {
            return Err(MarketDataError::MalformedFile(format!(
                "{} dates for {} return rows",
                dates.len(),
                returns.nrows()
            )));
        }
        if returns.iter().any(|r| !(*r > -1.0) || !r.is_finite()) {
            return Err(MarketDataError::MalformedFile(
                "return at or below -1".into(),
            ));
        }
        Ok(Self { dates, returns })
    }

    pub fn len(&self) -> usize {
        self.returns.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.returns.nrows() == 0
    }

    pub fn n_assets(&self) -> usize {
        self.returns.ncols()
    }
}

/// Trailing per-asset return matrix: row i is asset i's last `window` returns
/// ending at the anchor time.
#[derive(Debug, Clone)]
pub struct ReturnMatrix {
    /// n x window.
    pub values: Array2<f64>,
    pub window: usize,
    pub anchor_time: usize,
}

/// Pearson correlation matrix of the assets over an estimation window.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    /// n x n, symmetric, unit diagonal.
    pub values: Array2<f64>,
    pub window: usize,
    pub anchor_time: usize,
}

impl CorrelationMatrix {
    /// Validates symmetry (1e-12), exact unit diagonal, and entry bounds.
    pub fn new(values: Array2<f64>, window: usize, anchor_time: usize) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(MarketDataError::MalformedFile(format!(
                "correlation matrix {}x{} not square",
                n,
                values.ncols()
            )));
        }
        for i in 0..n {
            if values[[i, i]] != 1.0 {
                return Err(MarketDataError::MalformedFile(format!(
                    "diagonal entry {} is {}, expected exactly 1",
                    i,
                    values[[i, i]]
                )));
            }
            for j in (i + 1)..n {
                let (a, b) = (values[[i, j]], values[[j, i]]);
                if (a - b).abs() > 1e-12 {
                    return Err(MarketDataError::MalformedFile(format!(
                        "asymmetry at ({i},{j}): {a} vs {b}"
                    )));
                }
                if !(-1.0..=1.0).contains(&a) {
                    return Err(MarketDataError::MalformedFile(format!(
                        "off-diagonal ({i},{j}) = {a} outside [-1, 1]"
                    )));
                }
            }
        }
        Ok(Self {
            values,
            window,
            anchor_time,
        })
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }
}

/// Loads and aligns a delimiter-separated price file.
///
/// Empty cells (or `na`/`nan`, case-insensitive) mark a missing price; the
/// whole row is dropped so every remaining date is complete. Unparseable
/// dates or prices are an error, not a gap.
pub fn load_price_panel(path: &Path, schema: &PanelSchema) -> Result<AssetPanel> {
    if schema.price_columns.len() < 2 {
        return Err(MarketDataError::TooFewAssets(schema.price_columns.len()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) => MarketDataError::MalformedFile(format!("cannot open: {io}")),
            _ => MarketDataError::MalformedFile(e.to_string()),
        })?;

    let headers = reader
        .headers()
        .map_err(|e| MarketDataError::MalformedFile(format!("header row: {e}")))?
        .clone();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| MarketDataError::MalformedFile(format!("missing column `{name}`")))
    };
    let date_idx = col_index(&schema.date_column)?;
    let price_idx: Vec<usize> = schema
        .price_columns
        .iter()
        .map(|c| col_index(c))
        .collect::<Result<_>>()?;

    let is_missing = |cell: &str| {
        let c = cell.trim();
        c.is_empty() || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
    };

    let mut rows: Vec<(NaiveDate, Vec<f64>)> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record =
            record.map_err(|e| MarketDataError::MalformedFile(format!("row {}: {e}", line + 2)))?;
        let date_cell = record.get(date_idx).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_cell.trim(), "%Y-%m-%d").map_err(|_| {
            MarketDataError::MalformedFile(format!(
                "row {}: bad date `{}`",
                line + 2,
                date_cell.trim()
            ))
        })?;
        let mut prices = Vec::with_capacity(price_idx.len());
        let mut complete = true;
        for (&idx, col) in price_idx.iter().zip(&schema.price_columns) {
            let cell = record.get(idx).unwrap_or("");
            if is_missing(cell) {
                complete = false;
                break;
            }
            let p: f64 = cell.trim().parse().map_err(|_| {
                MarketDataError::MalformedFile(format!(
                    "row {}: bad price `{}` in column `{col}`",
                    line + 2,
                    cell.trim()
                ))
            })?;
            if !(p > 0.0) || !p.is_finite() {
                return Err(MarketDataError::NonPositivePrice {
                    asset: col.clone(),
                    date,
                    price: p,
                });
            }
            prices.push(p);
        }
        if complete {
            rows.push((date, prices));
        }
    }

    rows.sort_by_key(|(d, _)| *d);
    for w in rows.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(MarketDataError::MalformedFile(format!(
                "duplicate date {}",
                w[0].0
            )));
        }
    }

    let t = rows.len();
    if t < MIN_HISTORY {
        return Err(MarketDataError::TooShortHistory(t, MIN_HISTORY));
    }
    let n = schema.price_columns.len();
    let mut prices = Array2::<f64>::zeros((t, n));
    let mut dates = Vec::with_capacity(t);
    for (r, (date, row)) in rows.into_iter().enumerate() {
        dates.push(date);
        for (c, p) in row.into_iter().enumerate() {
            prices[[r, c]] = p;
        }
    }
    AssetPanel::new(dates, schema.price_columns.clone(), prices)
}

/// Simple daily returns: `returns[t][i] = prices[t+1][i] / prices[t][i] - 1`.
pub fn daily_returns(panel: &AssetPanel) -> ReturnPanel {
    let t = panel.n_days();
    let n = panel.n_assets();
    let mut returns = Array2::<f64>::zeros((t - 1, n));
    for row in 0..t - 1 {
        for col in 0..n {
            returns[[row, col]] = panel.prices[[row + 1, col]] / panel.prices[[row, col]] - 1.0;
        }
    }
    ReturnPanel {
        dates: panel.dates[1..].to_vec(),
        returns,
    }
}

/// Pearson correlation over the trailing `window` returns ending at `t`.
pub fn rolling_correlation(rp: &ReturnPanel, t: usize, window: usize) -> Result<CorrelationMatrix> {
    rolling_correlation_of(&rp.returns, t, window)
}

/// [`rolling_correlation`] on a raw return matrix (used by the environment
/// and the backtest driver, which work on simulated panels without dates).
pub fn rolling_correlation_of(
    returns: &Array2<f64>,
    t: usize,
    window: usize,
) -> Result<CorrelationMatrix> {
    if window < 2 || t + 1 < window || t >= returns.nrows() {
        return Err(MarketDataError::InsufficientHistory { t, needed: window });
    }
    let n = returns.ncols();
    let start = t + 1 - window;
    let mut means = vec![0.0; n];
    for i in 0..n {
        let mut s = 0.0;
        for row in start..=t {
            s += returns[[row, i]];
        }
        means[i] = s / window as f64;
    }
    // Sum of squared deviations per asset. A window of identical values must
    // be caught by equality, not by the accumulated sum: mean subtraction on
    // a non-representable constant leaves rounding residue.
    let mut ss = vec![0.0; n];
    for i in 0..n {
        let first = returns[[start, i]];
        if (start..=t).all(|row| returns[[row, i]] == first) {
            return Err(MarketDataError::ZeroVarianceAsset { asset: i, t });
        }
        for row in start..=t {
            let d = returns[[row, i]] - means[i];
            ss[i] += d * d;
        }
        if ss[i] == 0.0 {
            return Err(MarketDataError::ZeroVarianceAsset { asset: i, t });
        }
    }
    let mut values = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        values[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let mut cov = 0.0;
            for row in start..=t {
                cov += (returns[[row, i]] - means[i]) * (returns[[row, j]] - means[j]);
            }
            let r = (cov / (ss[i] * ss[j]).sqrt()).clamp(-1.0, 1.0);
            values[[i, j]] = r;
            values[[j, i]] = r;
        }
    }
    CorrelationMatrix::new(values, window, t)
}

/// Trailing 60-day per-asset return matrix ending at `t` (row order follows
/// the panel's asset order).
pub fn return_matrix(rp: &ReturnPanel, t: usize) -> Result<ReturnMatrix> {
    return_matrix_with_window(&rp.returns, t, OBS_WINDOW)
}

/// [`return_matrix`] with an explicit window, for overridden observation
/// widths and for raw (simulated) return matrices.
pub fn return_matrix_with_window(
    returns: &Array2<f64>,
    t: usize,
    window: usize,
) -> Result<ReturnMatrix> {
    if window == 0 || t + 1 < window || t >= returns.nrows() {
        return Err(MarketDataError::InsufficientHistory { t, needed: window });
    }
    let n = returns.ncols();
    let start = t + 1 - window;
    let mut values = Array2::<f64>::zeros((n, window));
    for i in 0..n {
        for (k, row) in (start..=t).enumerate() {
            values[[i, k]] = returns[[row, i]];
        }
    }
    Ok(ReturnMatrix {
        values,
        window,
        anchor_time: t,
    })
}

/// Annualized mean of a daily return slice.
pub fn annualize_mean(daily: &[f64]) -> f64 {
    linalg::mean(daily) * crate::TRADING_DAYS
}

/// Annualized sample standard deviation of a daily return slice.
pub fn annualize_std(daily: &[f64]) -> f64 {
    linalg::sample_std(daily) * crate::TRADING_DAYS.sqrt()
}

/// Evenly spaced synthetic weekday dates starting at `start`, for panels that
/// do not come from a data file (simulated markets, tests).
pub fn synthetic_dates(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut dates = Vec::with_capacity(count);
    let mut d = start;
    while dates.len() < count {
        if matches!(
            d.weekday(),
            chrono::Weekday::Sat | chrono::Weekday::Sun
        ) {
            d = d.succ_opt().expect("date overflow");
            continue;
        }
        dates.push(d);
        d = d.succ_opt().expect("date overflow");
    }
    dates
}
