//! Correlated geometric Brownian motion market generator.
//!
//! Each representative correlation matrix gets its own family of simulated
//! price panels: drift and volatility are estimated from the historical
//! returns restricted to the regime's member windows, the matrix is Cholesky
//! factored (with an escalating diagonal jitter when it is only
//! semidefinite), and paths follow the exact one-step discretization
//! `S_{t+dt} = S_t * exp[(mu - sigma^2/2) dt + sigma * eps * sqrt(dt)]`.
//!
//! Normal deviates come from an inverse-CDF transform of a counter-based
//! (ChaCha) uniform stream, one independent stream per path seed, so panels
//! are bit-reproducible and can be generated in any order or in parallel.

use std::collections::BTreeSet;
use std::io::Write;

use ndarray::{Array1, Array2};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::linalg;
use crate::market_data::{CorrelationMatrix, ReturnPanel};
use crate::rcme::RepresentativeSet;

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("insufficient samples: {got} daily returns in member windows, need {needed}")]
    InsufficientSamples { got: usize, needed: usize },
    #[error("zero volatility for asset {0}")]
    ZeroVolatility(usize),
    #[error("correlation matrix not factorizable even at jitter {max_jitter}")]
    NotFactorizable { max_jitter: f64 },
    #[error("invalid GBM parameters: {0}")]
    InvalidParams(String),
    #[error("representative index {index} out of range (k = {k})")]
    BadRepresentative { index: usize, k: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimulatorError>;

/// Minimum number of daily returns required to estimate regime moments.
pub const MIN_ESTIMATION_SAMPLES: usize = 30;

/// Per-asset GBM drift/volatility (annualized) plus the step size and
/// initial prices.
#[derive(Debug, Clone)]
pub struct GbmParams {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    /// Time step in years.
    pub dt: f64,
    pub s0: Vec<f64>,
}

impl GbmParams {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>, dt: f64, s0: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() || mu.len() != s0.len() || mu.is_empty() {
            return Err(SimulatorError::InvalidParams(
                "mu/sigma/s0 lengths disagree".into(),
            ));
        }
        if !(dt > 0.0) {
            return Err(SimulatorError::InvalidParams(format!("dt = {dt}")));
        }
        if let Some(i) = sigma.iter().position(|s| !(*s > 0.0)) {
            return Err(SimulatorError::ZeroVolatility(i));
        }
        if s0.iter().any(|p| !(*p > 0.0)) {
            return Err(SimulatorError::InvalidParams("s0 must be positive".into()));
        }
        Ok(Self { mu, sigma, dt, s0 })
    }

    pub fn n_assets(&self) -> usize {
        self.mu.len()
    }
}

/// Lower-triangular factor of a (possibly jittered) correlation matrix.
#[derive(Debug, Clone)]
pub struct CorrelationRoot {
    pub lower: Array2<f64>,
    pub jitter_used: f64,
}

impl CorrelationRoot {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }
}

/// One simulated price panel: `(H+1) x n`, row 0 equal to `s0`.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub prices: Array2<f64>,
    pub seed: u64,
    pub source_representative: usize,
}

impl SimulatedPanel {
    pub fn n_assets(&self) -> usize {
        self.prices.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.prices.nrows()
    }

    /// Simple daily returns of the simulated prices, `H x n`.
    pub fn returns(&self) -> Array2<f64> {
        let (rows, n) = (self.prices.nrows(), self.prices.ncols());
        let mut out = Array2::<f64>::zeros((rows - 1, n));
        for t in 0..rows - 1 {
            for i in 0..n {
                out[[t, i]] = self.prices[[t + 1, i]] / self.prices[[t, i]] - 1.0;
            }
        }
        out
    }

    /// Dumps the panel in the same delimited layout the loader reads
    /// (synthetic weekday dates, one close column per asset).
    pub fn write_csv(&self, mut w: impl Write, delimiter: char) -> Result<()> {
        let n = self.n_assets();
        let header: Vec<String> = std::iter::once("date".to_string())
            .chain((0..n).map(|i| format!("asset_{i}")))
            .collect();
        writeln!(w, "{}", header.join(&delimiter.to_string()))?;
        let dates = crate::market_data::synthetic_dates(
            chrono::NaiveDate::from_ymd_opt(2000, 1, 3).expect("valid date"),
            self.n_rows(),
        );
        for (t, date) in dates.iter().enumerate() {
            let mut row = vec![date.to_string()];
            for i in 0..n {
                row.push(self.prices[[t, i]].to_string());
            }
            writeln!(w, "{}", row.join(&delimiter.to_string()))?;
        }
        Ok(())
    }
}

/// Estimates annualized drift and volatility from the daily returns inside
/// the union of the member anchor windows (each anchor time `t` contributes
/// rows `t-window+1 ..= t`).
pub fn estimate_gbm_params(
    rp: &ReturnPanel,
    member_times: &[usize],
    window: usize,
    dt: f64,
) -> Result<GbmParams> {
    let mut rows = BTreeSet::new();
    for &t in member_times {
        if t >= rp.len() {
            return Err(SimulatorError::InvalidParams(format!(
                "member time {t} outside return panel of length {}",
                rp.len()
            )));
        }
        for r in t.saturating_sub(window - 1)..=t {
            rows.insert(r);
        }
    }
    if rows.len() < MIN_ESTIMATION_SAMPLES {
        return Err(SimulatorError::InsufficientSamples {
            got: rows.len(),
            needed: MIN_ESTIMATION_SAMPLES,
        });
    }
    let n = rp.n_assets();
    let mut mu = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for i in 0..n {
        let daily: Vec<f64> = rows.iter().map(|&r| rp.returns[[r, i]]).collect();
        let std = linalg::sample_std(&daily);
        // A constant series must fail even when mean subtraction leaves
        // rounding residue, so check equality as well as the statistic.
        if std == 0.0 || daily.iter().all(|&x| x == daily[0]) {
            return Err(SimulatorError::ZeroVolatility(i));
        }
        mu.push(linalg::mean(&daily) * crate::TRADING_DAYS);
        sigma.push(std * crate::TRADING_DAYS.sqrt());
    }
    GbmParams::new(mu, sigma, dt, vec![100.0; n])
}

/// Jitter ladder for [`correlation_root`]: none, then 1e-8 up to 1e-4 in
/// factor-of-ten steps.
const JITTERS: [f64; 6] = [0.0, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Cholesky factor of the correlation matrix, adding escalating diagonal
/// jitter (with the diagonal rescaled back to 1) when the matrix is only
/// positive semidefinite.
pub fn correlation_root(target: &CorrelationMatrix) -> Result<CorrelationRoot> {
    let n = target.dim();
    for &eps in &JITTERS {
        let mut a = target.values.clone();
        if eps > 0.0 {
            // (Sigma + eps*I) / (1 + eps) keeps the unit diagonal.
            a.mapv_inplace(|v| v / (1.0 + eps));
            for i in 0..n {
                a[[i, i]] = 1.0;
            }
        }
        if let Some(lower) = linalg::cholesky(&a) {
            return Ok(CorrelationRoot {
                lower,
                jitter_used: eps,
            });
        }
    }
    Err(SimulatorError::NotFactorizable {
        max_jitter: *JITTERS.last().expect("non-empty ladder"),
    })
}

/// Uniform in the open interval (0, 1) from a raw 64-bit draw; never exactly
/// 0 or 1, so the inverse normal CDF stays finite.
fn open_unit(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Simulates one correlated GBM panel over `horizon` steps.
///
/// Shocks are drawn step-major, asset-minor from a ChaCha stream seeded by
/// `seed`; identical arguments give a bit-identical panel.
pub fn simulate_paths(
    params: &GbmParams,
    root: &CorrelationRoot,
    horizon: usize,
    seed: u64,
) -> Result<SimulatedPanel> {
    simulate_paths_recording(params, root, horizon, seed).map(|(panel, _)| panel)
}

/// [`simulate_paths`] that also returns the correlated standard-normal
/// shocks (`horizon x n`), for diagnostics and discretization checks.
pub fn simulate_paths_recording(
    params: &GbmParams,
    root: &CorrelationRoot,
    horizon: usize,
    seed: u64,
) -> Result<(SimulatedPanel, Array2<f64>)> {
    let n = params.n_assets();
    if root.dim() != n {
        return Err(SimulatorError::InvalidParams(format!(
            "correlation root dim {} vs {} assets",
            root.dim(),
            n
        )));
    }
    if horizon == 0 {
        return Err(SimulatorError::InvalidParams("horizon must be >= 1".into()));
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dt = params.dt;
    let sqrt_dt = dt.sqrt();
    let mut prices = Array2::<f64>::zeros((horizon + 1, n));
    let mut shocks = Array2::<f64>::zeros((horizon, n));
    for i in 0..n {
        prices[[0, i]] = params.s0[i];
    }
    let mut z = Array1::<f64>::zeros(n);
    for t in 0..horizon {
        for zi in z.iter_mut() {
            *zi = normal.inverse_cdf(open_unit(rng.next_u64()));
        }
        for i in 0..n {
            // eps_i = (L z)_i, standard normal with the target cross-correlation
            let mut eps = 0.0;
            for j in 0..=i {
                eps += root.lower[[i, j]] * z[j];
            }
            shocks[[t, i]] = eps;
            let drift = (params.mu[i] - 0.5 * params.sigma[i] * params.sigma[i]) * dt;
            prices[[t + 1, i]] = prices[[t, i]] * (drift + params.sigma[i] * eps * sqrt_dt).exp();
        }
    }
    Ok((
        SimulatedPanel {
            prices,
            seed,
            source_representative: 0,
        },
        shocks,
    ))
}

/// Dataset generation settings for one representative matrix.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_paths: usize,
    pub horizon: usize,
    pub dt: f64,
    pub base_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_paths: 64,
            horizon: 756,
            dt: 1.0 / crate::TRADING_DAYS,
            base_seed: 0,
        }
    }
}

/// Generates `n_paths` panels for one representative matrix, seeds
/// `base_seed .. base_seed + n_paths`, each tagged with the representative
/// index. Paths are independent streams, so parallel generation matches
/// sequential output exactly.
pub fn generate_dataset(
    rep_index: usize,
    rs: &RepresentativeSet,
    rp: &ReturnPanel,
    cfg: &SimConfig,
) -> Result<Vec<SimulatedPanel>> {
    if rep_index >= rs.k() {
        return Err(SimulatorError::BadRepresentative {
            index: rep_index,
            k: rs.k(),
        });
    }
    let params = estimate_gbm_params(rp, &rs.member_times[rep_index], rs.window, cfg.dt)?;
    let root = correlation_root(&rs.matrices[rep_index])?;
    (0..cfg.n_paths)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.base_seed.wrapping_add(i as u64);
            let mut panel = simulate_paths(&params, &root, cfg.horizon, seed)?;
            panel.source_representative = rep_index;
            Ok(panel)
        })
        .collect()
}
