//! Shared fixture builders for the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mcpm_core::market_data::{self, CorrelationMatrix, ReturnPanel};

/// Random return panel with mildly correlated columns.
pub fn random_return_panel(t: usize, n: usize, seed: u64) -> ReturnPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut returns = Array2::<f64>::zeros((t, n));
    for row in 0..t {
        let common = rng.random_range(-0.008..0.008);
        for col in 0..n {
            returns[[row, col]] = common + rng.random_range(-0.01..0.01);
        }
    }
    ReturnPanel::from_returns(
        market_data::synthetic_dates(chrono::NaiveDate::from_ymd_opt(2010, 1, 4).unwrap(), t),
        returns,
    )
    .expect("valid panel")
}

/// Random valid correlation matrix (Gram matrix of unit vectors).
pub fn random_correlation(n: usize, seed: u64) -> CorrelationMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = n + 2;
    let g = Array2::from_shape_fn((n, dim), |_| rng.random_range(-1.0..1.0f64));
    let mut values = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        values[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let num: f64 = (0..dim).map(|k| g[[i, k]] * g[[j, k]]).sum();
            let di: f64 = (0..dim).map(|k| g[[i, k]] * g[[i, k]]).sum();
            let dj: f64 = (0..dim).map(|k| g[[j, k]] * g[[j, k]]).sum();
            let v = (num / (di * dj).sqrt()).clamp(-1.0, 1.0);
            values[[i, j]] = v;
            values[[j, i]] = v;
        }
    }
    CorrelationMatrix::new(values, 60, 0).expect("valid correlation")
}

/// Random SPD covariance matrix.
pub fn random_covariance(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Array2::from_shape_fn((n, n), |_| rng.random_range(-0.3..0.3f64));
    let mut cov = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a[[i, k]] * a[[j, k]];
            }
            cov[[i, j]] = acc;
        }
        cov[[i, i]] += 0.01;
    }
    cov
}
