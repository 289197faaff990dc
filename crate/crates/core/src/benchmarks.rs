//! Classical comparison allocators: Markowitz max-Sharpe tangency
//! (long-only), equal-risk-contribution risk parity, and equal weight.
//!
//! All three map trailing moment estimates to a continuous weight vector on
//! the simplex. Markowitz runs projected gradient ascent on the Sharpe ratio
//! from multiple starts; risk parity runs cyclical coordinate descent on the
//! log-barrier formulation until every risk contribution equals 1/n.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error)]
pub enum BenchmarkError {
    #[error("singular covariance: not factorizable after 1e-10 ridge")]
    SingularCovariance,
    #[error("risk parity did not converge: residual {residual} after {sweeps} sweeps")]
    NoConvergence { residual: f64, sweeps: usize },
    #[error("invalid moments: {0}")]
    InvalidMoments(String),
}

pub type Result<T> = std::result::Result<T, BenchmarkError>;

/// Ridge added to the covariance diagonal before factorization checks.
pub const COV_RIDGE: f64 = 1e-10;

/// Annualized moment estimates over a trailing window.
#[derive(Debug, Clone)]
pub struct MomentEstimates {
    pub mu_hat: Vec<f64>,
    pub cov_hat: Array2<f64>,
    pub window: usize,
}

impl MomentEstimates {
    pub fn new(mu_hat: Vec<f64>, cov_hat: Array2<f64>, window: usize) -> Result<Self> {
        let n = mu_hat.len();
        if cov_hat.nrows() != n || cov_hat.ncols() != n || n == 0 {
            return Err(BenchmarkError::InvalidMoments(format!(
                "{n} means vs {}x{} covariance",
                cov_hat.nrows(),
                cov_hat.ncols()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                if !cov_hat[[i, j]].is_finite()
                    || (cov_hat[[i, j]] - cov_hat[[j, i]]).abs() > 1e-10
                {
                    return Err(BenchmarkError::InvalidMoments(format!(
                        "covariance not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        Ok(Self {
            mu_hat,
            cov_hat,
            window,
        })
    }

    /// Sample moments of trailing daily returns (rows `t-window+1 ..= t` of
    /// the return matrix), annualized by 252.
    pub fn from_trailing_returns(returns: &Array2<f64>, t: usize, window: usize) -> Result<Self> {
        let window = window.min(t + 1);
        if window < 2 {
            return Err(BenchmarkError::InvalidMoments(format!(
                "window {window} too short at t={t}"
            )));
        }
        let n = returns.ncols();
        let start = t + 1 - window;
        let mut mu = vec![0.0; n];
        for i in 0..n {
            for r in start..=t {
                mu[i] += returns[[r, i]];
            }
            mu[i] /= window as f64;
        }
        let mut cov = Array2::<f64>::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for r in start..=t {
                    acc += (returns[[r, i]] - mu[i]) * (returns[[r, j]] - mu[j]);
                }
                let c = acc / (window - 1) as f64 * crate::TRADING_DAYS;
                cov[[i, j]] = c;
                cov[[j, i]] = c;
            }
        }
        let mu_hat = mu.into_iter().map(|m| m * crate::TRADING_DAYS).collect();
        Self::new(mu_hat, cov, window)
    }

    pub fn n_assets(&self) -> usize {
        self.mu_hat.len()
    }
}

/// Solver diagnostics attached to every allocation.
#[derive(Debug, Clone, Default)]
pub struct AllocatorDiagnostics {
    pub iterations: usize,
    pub residual: f64,
    pub ridge: f64,
    /// Markowitz fell back to minimum variance (all estimated means <= 0).
    pub min_variance_fallback: bool,
}

#[derive(Debug, Clone)]
pub struct AllocatorWeights {
    pub weights: Vec<f64>,
    pub allocator: &'static str,
    pub diagnostics: AllocatorDiagnostics,
}

/// Exactly 1/n each; the final entry absorbs the rounding so the sum is
/// exactly 1.
pub fn equal_weights(n: usize) -> AllocatorWeights {
    assert!(n >= 1, "need at least one asset");
    let w = 1.0 / n as f64;
    let mut weights = vec![w; n];
    let head: f64 = weights[..n - 1].iter().sum();
    weights[n - 1] = 1.0 - head;
    AllocatorWeights {
        weights,
        allocator: "equal_weight",
        diagnostics: AllocatorDiagnostics::default(),
    }
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_simplex(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut sorted = x.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    let mut rho = 0;
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let candidate = (cumsum - 1.0) / (i + 1) as f64;
        if v - candidate > 0.0 {
            theta = candidate;
            rho = i + 1;
        }
    }
    debug_assert!(rho > 0);
    let mut out: Vec<f64> = x.iter().map(|&v| (v - theta).max(0.0)).collect();
    // Exact simplex membership: renormalize the active support.
    let sum: f64 = out.iter().sum();
    if sum > 0.0 {
        for w in &mut out {
            *w /= sum;
        }
    } else {
        out = equal_weights(n).weights;
    }
    let head: f64 = out[..n - 1].iter().sum();
    out[n - 1] = 1.0 - head;
    if out[n - 1] < 0.0 {
        out[n - 1] = 0.0;
    }
    out
}

fn quad_form(cov: &Array2<f64>, w: &[f64]) -> f64 {
    let n = w.len();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            acc += w[i] * cov[[i, j]] * w[j];
        }
    }
    acc
}

fn mat_vec(cov: &Array2<f64>, w: &[f64]) -> Vec<f64> {
    let n = w.len();
    (0..n)
        .map(|i| (0..n).map(|j| cov[[i, j]] * w[j]).sum())
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Projected gradient ascent of `objective` over the simplex with step
/// halving. Converges when the probe-step projected gradient norm falls
/// below `tol`. Returns (weights, iterations, residual).
fn projected_gradient_ascent(
    start: Vec<f64>,
    objective: &dyn Fn(&[f64]) -> f64,
    gradient: &dyn Fn(&[f64]) -> Vec<f64>,
    tol: f64,
    max_iters: usize,
) -> (Vec<f64>, usize, f64) {
    let mut w = project_simplex(&start);
    let mut f = objective(&w);
    let mut residual = f64::INFINITY;
    for iter in 0..max_iters {
        let g = gradient(&w);
        // stationarity probe at unit step
        let probe: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi + gi).collect();
        let projected = project_simplex(&probe);
        residual = w
            .iter()
            .zip(&projected)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if residual <= tol {
            return (w, iter, residual);
        }
        let mut step = 1.0;
        let mut advanced = false;
        for _ in 0..60 {
            let trial: Vec<f64> = w
                .iter()
                .zip(&g)
                .map(|(wi, gi)| wi + step * gi)
                .collect();
            let trial = project_simplex(&trial);
            let f_trial = objective(&trial);
            if f_trial > f {
                w = trial;
                f = f_trial;
                advanced = true;
                break;
            }
            step *= 0.5;
        }
        if !advanced {
            return (w, iter, residual);
        }
    }
    (w, max_iters, residual)
}

const MARKOWITZ_STARTS: usize = 16;
const MARKOWITZ_TOL: f64 = 1e-8;
const MARKOWITZ_MAX_ITERS: usize = 20_000;

/// Long-only maximum-Sharpe (tangency) portfolio by projected gradient
/// ascent from 16 multi-starts (the vertices plus seeded uniform interior
/// draws). Falls back to minimum variance when every estimated mean is
/// non-positive.
pub fn markowitz_weights(m: &MomentEstimates) -> Result<AllocatorWeights> {
    let n = m.n_assets();
    let mut cov = m.cov_hat.clone();
    for i in 0..n {
        cov[[i, i]] += COV_RIDGE;
    }
    if linalg::cholesky(&cov).is_none() {
        return Err(BenchmarkError::SingularCovariance);
    }
    let mu = m.mu_hat.clone();
    let fallback = mu.iter().all(|&x| x <= 0.0);

    let sharpe = |w: &[f64]| -> f64 {
        let variance = quad_form(&cov, w);
        dot(&mu, w) / variance.sqrt()
    };
    let sharpe_grad = |w: &[f64]| -> Vec<f64> {
        let variance = quad_form(&cov, w);
        let vol = variance.sqrt();
        let mean = dot(&mu, w);
        let cw = mat_vec(&cov, w);
        (0..w.len())
            .map(|i| mu[i] / vol - mean * cw[i] / (vol * variance))
            .collect()
    };
    let neg_var = |w: &[f64]| -> f64 { -quad_form(&cov, w) };
    let neg_var_grad = |w: &[f64]| -> Vec<f64> {
        mat_vec(&cov, w).into_iter().map(|x| -2.0 * x).collect()
    };

    let objective: &dyn Fn(&[f64]) -> f64 = if fallback { &neg_var } else { &sharpe };
    let gradient: &dyn Fn(&[f64]) -> Vec<f64> = if fallback { &neg_var_grad } else { &sharpe_grad };

    // vertices first, then seeded interior draws up to 16 starts
    let mut starts: Vec<Vec<f64>> = (0..n.min(MARKOWITZ_STARTS))
        .map(|i| {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0x4d61726b);
    while starts.len() < MARKOWITZ_STARTS {
        // uniform on the simplex via normalized exponentials
        let draws: Vec<f64> = (0..n)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        let total: f64 = draws.iter().sum();
        starts.push(draws.into_iter().map(|d| d / total).collect());
    }

    let mut best: Option<(f64, Vec<f64>, usize, f64)> = None;
    for start in starts {
        let (w, iters, residual) =
            projected_gradient_ascent(start, objective, gradient, MARKOWITZ_TOL, MARKOWITZ_MAX_ITERS);
        let score = objective(&w);
        let better = match &best {
            Some((best_score, ..)) => score > *best_score,
            None => true,
        };
        if better {
            best = Some((score, w, iters, residual));
        }
    }
    let (_, weights, iterations, residual) = best.expect("at least one start");
    Ok(AllocatorWeights {
        weights,
        allocator: "markowitz",
        diagnostics: AllocatorDiagnostics {
            iterations,
            residual,
            ridge: COV_RIDGE,
            min_variance_fallback: fallback,
        },
    })
}

const RISK_PARITY_TOL: f64 = 1e-8;
const RISK_PARITY_MAX_SWEEPS: usize = 10_000;

/// Risk contribution vector `RC_i = w_i (Sigma w)_i / (w' Sigma w)`.
pub fn risk_contributions(cov: &Array2<f64>, w: &[f64]) -> Vec<f64> {
    let total = quad_form(cov, w);
    let cw = mat_vec(cov, w);
    w.iter().zip(cw).map(|(wi, ci)| wi * ci / total).collect()
}

/// Equal-risk-contribution weights by cyclical coordinate descent starting
/// from equal weights; converges when `max_i |RC_i - 1/n| <= 1e-8`.
pub fn risk_parity_weights(m: &MomentEstimates) -> Result<AllocatorWeights> {
    let n = m.n_assets();
    let cov = &m.cov_hat;
    for i in 0..n {
        if !(cov[[i, i]] > 0.0) {
            return Err(BenchmarkError::InvalidMoments(format!(
                "non-positive variance for asset {i}"
            )));
        }
    }
    let budget = 1.0 / n as f64;
    let mut y: Vec<f64> = vec![budget; n];
    let mut residual = f64::INFINITY;
    for sweep in 0..RISK_PARITY_MAX_SWEEPS {
        for i in 0..n {
            // c_i = (Sigma y)_i without the diagonal term
            let mut c = 0.0;
            for j in 0..n {
                if j != i {
                    c += cov[[i, j]] * y[j];
                }
            }
            // minimizer of 1/2 sigma_ii y_i^2 + c y_i - b ln y_i
            y[i] = (-c + (c * c + 4.0 * cov[[i, i]] * budget).sqrt()) / (2.0 * cov[[i, i]]);
        }
        let total: f64 = y.iter().sum();
        let w: Vec<f64> = y.iter().map(|v| v / total).collect();
        let rc = risk_contributions(cov, &w);
        residual = rc
            .iter()
            .map(|r| (r - budget).abs())
            .fold(0.0f64, f64::max);
        if residual <= RISK_PARITY_TOL {
            let mut weights = w;
            let head: f64 = weights[..n - 1].iter().sum();
            weights[n - 1] = 1.0 - head;
            return Ok(AllocatorWeights {
                weights,
                allocator: "risk_budgeting",
                diagnostics: AllocatorDiagnostics {
                    iterations: sweep + 1,
                    residual,
                    ridge: 0.0,
                    min_variance_fallback: false,
                },
            });
        }
    }
    Err(BenchmarkError::NoConvergence {
        residual,
        sweeps: RISK_PARITY_MAX_SWEEPS,
    })
}
