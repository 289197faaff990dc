//! Acceptance suite: one test per criterion, each printing a PASS line with
//! the measured quantities (run with `--nocapture` to see them).
//!
//! Criteria 1-9 and 11 exercise the core library directly; criterion 10
//! drives the `mcpm` binary end to end on a synthetic panel.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{arr2, Array1, Array2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use mcpm_core::action_space::{
    self, ActionExtractConfig, ActionProvenance, ActionSet, Direction, MarketInterval,
    WeightVector,
};
use mcpm_core::agent::{
    self, advantage_targets, frozen_surrogate_loss, loss_and_gradients, ConvSpec, EnvFactory,
    NetArchitecture, PolicyValueParams, TrainConfig, TrainMode, Trajectory, Transition,
};
use mcpm_core::benchmarks::{markowitz_weights, risk_parity_weights, MomentEstimates};
use mcpm_core::evaluation;
use mcpm_core::market_data::{self, CorrelationMatrix, ReturnPanel};
use mcpm_core::portfolio_env::{EnvConfig, PortfolioEnv, RewardMode};
use mcpm_core::rcme;
use mcpm_core::simulator::{self, CorrelationRoot, GbmParams};

fn corr(values: Array2<f64>) -> CorrelationMatrix {
    CorrelationMatrix::new(values, 60, 0).unwrap()
}

fn return_panel(returns: Array2<f64>) -> ReturnPanel {
    let t = returns.nrows();
    ReturnPanel::from_returns(
        market_data::synthetic_dates(chrono::NaiveDate::from_ymd_opt(2010, 1, 4).unwrap(), t),
        returns,
    )
    .unwrap()
}

fn toy_action_set(vectors: Vec<Vec<u32>>, grid_step_bp: u32) -> Arc<ActionSet> {
    let n = vectors[0].len();
    let actions: Vec<WeightVector> = vectors
        .into_iter()
        .map(|weights_bp| WeightVector { weights_bp })
        .collect();
    let provenance = actions
        .iter()
        .map(|_| ActionProvenance {
            interval_index: 0,
            interval: MarketInterval {
                start: 0,
                end: 1,
                direction: Direction::Up,
            },
            score: 0.0,
            rank: 0,
        })
        .collect();
    Arc::new(ActionSet {
        actions,
        provenance,
        n_assets: n,
        grid_step_bp,
    })
}

/// Criterion 1: 3-asset correlated GBM, 1e5 steps: log-return correlations
/// within +-0.02 of the target entry-wise, increment mean/variance within 3
/// standard errors of the analytic values. Runtime <= 10 s.
#[test]
fn criterion_01_simulator_fidelity() {
    let started = Instant::now();
    let target = corr(arr2(&[
        [1.0, 0.8, -0.3],
        [0.8, 1.0, 0.1],
        [-0.3, 0.1, 1.0],
    ]));
    let mu = [0.08, 0.03, -0.02];
    let sigma = [0.25, 0.18, 0.12];
    let dt = 1.0 / 252.0;
    let params = GbmParams::new(mu.to_vec(), sigma.to_vec(), dt, vec![100.0; 3]).unwrap();
    let root = simulator::correlation_root(&target).unwrap();
    let h = 100_000;
    let panel = simulator::simulate_paths(&params, &root, h, 314_159).unwrap();

    let mut log_returns = Array2::<f64>::zeros((h, 3));
    for t in 0..h {
        for i in 0..3 {
            log_returns[[t, i]] = (panel.prices[[t + 1, i]] / panel.prices[[t, i]]).ln();
        }
    }
    let n = h as f64;
    let mut means = [0.0; 3];
    let mut vars = [0.0; 3];
    for i in 0..3 {
        let col: Vec<f64> = (0..h).map(|t| log_returns[[t, i]]).collect();
        let m = col.iter().sum::<f64>() / n;
        let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
        means[i] = m;
        vars[i] = v;
    }
    let mut max_corr_err = 0.0f64;
    for i in 0..3 {
        for j in (i + 1)..3 {
            let mut cov = 0.0;
            for t in 0..h {
                cov += (log_returns[[t, i]] - means[i]) * (log_returns[[t, j]] - means[j]);
            }
            cov /= n - 1.0;
            let sample_rho = cov / (vars[i] * vars[j]).sqrt();
            let err = (sample_rho - target.values[[i, j]]).abs();
            max_corr_err = max_corr_err.max(err);
            assert!(
                err <= 0.02,
                "corr({i},{j}) = {sample_rho} vs {} (err {err})",
                target.values[[i, j]]
            );
        }
    }
    let mut worst_mean_z = 0.0f64;
    let mut worst_var_z = 0.0f64;
    for i in 0..3 {
        let expect_mean = (mu[i] - 0.5 * sigma[i] * sigma[i]) * dt;
        let expect_var = sigma[i] * sigma[i] * dt;
        let mean_se = (expect_var / n).sqrt();
        let var_se = expect_var * (2.0 / (n - 1.0)).sqrt();
        let mean_z = (means[i] - expect_mean).abs() / mean_se;
        let var_z = (vars[i] - expect_var).abs() / var_se;
        worst_mean_z = worst_mean_z.max(mean_z);
        worst_var_z = worst_var_z.max(var_z);
        assert!(mean_z <= 3.0, "asset {i}: mean z-score {mean_z}");
        assert!(var_z <= 3.0, "asset {i}: variance z-score {var_z}");
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() <= 10.0, "took {elapsed:?}");
    println!(
        "criterion 01: PASS - max corr err {max_corr_err:.4} (<=0.02), worst mean/var z {worst_mean_z:.2}/{worst_var_z:.2} (<=3), {elapsed:?}"
    );
}

/// Criterion 2: iterated one-step updates equal the closed-form solution
/// with shared shocks, 1e-10 relative, 1000 random trials. Runtime <= 1 s.
#[test]
fn criterion_02_exact_discretization() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(271_828);
    let mut worst_rel = 0.0f64;
    for trial in 0..1000 {
        let n = rng.random_range(1..4usize);
        let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-0.2..0.3)).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.5)).collect();
        let dt = rng.random_range(0.001..0.01);
        let s0: Vec<f64> = (0..n).map(|_| rng.random_range(10.0..500.0)).collect();
        let params = GbmParams::new(mu.clone(), sigma.clone(), dt, s0.clone()).unwrap();
        let root = CorrelationRoot {
            lower: Array2::eye(n),
            jitter_used: 0.0,
        };
        let h = rng.random_range(2..40usize);
        let (panel, shocks) =
            simulator::simulate_paths_recording(&params, &root, h, trial as u64).unwrap();
        for i in 0..n {
            let cum: f64 = (0..h).map(|t| shocks[[t, i]]).sum();
            let t_years = h as f64 * dt;
            let closed = s0[i]
                * ((mu[i] - 0.5 * sigma[i] * sigma[i]) * t_years + sigma[i] * cum * dt.sqrt())
                    .exp();
            let rel = (panel.prices[[h, i]] - closed).abs() / closed;
            worst_rel = worst_rel.max(rel);
            assert!(rel <= 1e-10, "trial {trial} asset {i}: rel err {rel}");
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() <= 1.0, "took {elapsed:?}");
    println!("criterion 02: PASS - worst relative error {worst_rel:.3e} (<=1e-10), {elapsed:?}");
}

/// Criterion 3: planted two-regime panel (rho = 0.8 then -0.2, 500 days
/// each), window 60, K=2: anchors more than 60 days from the change point
/// recover the planted split exactly. Runtime <= 30 s.
#[test]
fn criterion_03_rcme_planted_regime_recovery() {
    let started = Instant::now();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draw = |rng: &mut ChaCha8Rng| {
        normal.inverse_cdf(((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64))
    };
    let t_total = 1000;
    let change = 500;
    let mut returns = Array2::<f64>::zeros((t_total, 2));
    for t in 0..t_total {
        let rho: f64 = if t < change { 0.8 } else { -0.2 };
        let z1 = draw(&mut rng);
        let z2 = draw(&mut rng);
        returns[[t, 0]] = 0.01 * z1;
        returns[[t, 1]] = 0.009 * (rho * z1 + (1.0 - rho * rho).sqrt() * z2);
    }
    let rp = return_panel(returns);
    let window = 60;
    let cms = rcme::build_cms(&rp, window, 1).unwrap();
    let cmdm = rcme::build_cmdm(&cms).unwrap();
    let assignment = rcme::cluster(&cmdm, 2, rcme::Linkage::Average).unwrap();

    // exclusion band: anchors within 60 days of the change point, plus the
    // anchors whose window straddles it
    let pre: Vec<usize> = cms
        .anchor_times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t + 60 < change)
        .map(|(i, _)| i)
        .collect();
    let post: Vec<usize> = cms
        .anchor_times
        .iter()
        .enumerate()
        .filter(|(_, &t)| t >= change + window + 60)
        .map(|(i, _)| i)
        .collect();
    assert!(pre.len() > 300 && post.len() > 300);
    let pre_label = assignment.labels[pre[0]];
    let post_label = assignment.labels[post[0]];
    assert_ne!(pre_label, post_label, "regimes collapsed into one cluster");
    for &i in &pre {
        assert_eq!(
            assignment.labels[i], pre_label,
            "pre-change anchor t={} mislabeled",
            cms.anchor_times[i]
        );
    }
    for &i in &post {
        assert_eq!(
            assignment.labels[i], post_label,
            "post-change anchor t={} mislabeled",
            cms.anchor_times[i]
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() <= 30.0, "took {elapsed:?}");
    println!(
        "criterion 03: PASS - {} pre and {} post anchors recovered exactly, {elapsed:?}",
        pre.len(),
        post.len()
    );
}

fn random_correlation(n: usize, rng: &mut ChaCha8Rng) -> CorrelationMatrix {
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
    corr(values)
}

/// Criterion 4: Frobenius distance and representative averaging match
/// double-loop oracles to 1e-12 on 100 random instances.
#[test]
fn criterion_04_frobenius_and_averaging_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1234);
    let mut worst_dist = 0.0f64;
    let mut worst_avg = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..7usize);
        let a = random_correlation(n, &mut rng);
        let b = random_correlation(n, &mut rng);
        let mut sum = 0.0;
        for k in 0..n {
            for l in 0..n {
                let d: f64 = a.values[[k, l]] - b.values[[k, l]];
                sum += d.abs().powi(2);
            }
        }
        let oracle = sum.sqrt();
        let err = (rcme::correlation_distance(&a, &b).unwrap() - oracle).abs();
        worst_dist = worst_dist.max(err);
        assert!(err <= 1e-12);

        let members: Vec<CorrelationMatrix> =
            (0..rng.random_range(2..8usize)).map(|_| random_correlation(n, &mut rng)).collect();
        let m = members.len();
        let cms = rcme::CorrelationMatrixSet {
            entries: members.clone(),
            anchor_times: (0..m).map(|i| 59 + i).collect(),
            window: 60,
            stride: 1,
        };
        let ca = rcme::ClusterAssignment {
            labels: vec![0; m],
            k: 1,
            member_indices: vec![(0..m).collect()],
        };
        let rs = rcme::representative_matrices(&ca, &cms, rcme::Linkage::Average).unwrap();
        for i in 0..n {
            for j in 0..n {
                let mean: f64 =
                    members.iter().map(|e| e.values[[i, j]]).sum::<f64>() / m as f64;
                let expect = if i == j { 1.0 } else { mean };
                let err = (rs.matrices[0].values[[i, j]] - expect).abs();
                worst_avg = worst_avg.max(err);
                assert!(err <= 1e-12);
            }
        }
    }
    println!(
        "criterion 04: PASS - worst distance err {worst_dist:.2e}, worst averaging err {worst_avg:.2e} (<=1e-12)"
    );
}

/// Criterion 5: weight-vector counts match stars-and-bars and exhaustive
/// enumeration for n <= 4, g <= 20; the dominant-asset toy interval returns
/// the all-in vector end to end.
#[test]
fn criterion_05_action_space_combinatorics() {
    fn enumerate_all(levels: u32, n: usize) -> Vec<Vec<u32>> {
        fn go(levels: u32, n: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
            if n == 1 {
                let mut v = prefix.clone();
                v.push(levels);
                out.push(v);
                return;
            }
            for w in 0..=levels {
                prefix.push(w);
                go(levels - w, n - 1, prefix, out);
                prefix.pop();
            }
        }
        let mut out = Vec::new();
        go(levels, n, &mut Vec::new(), &mut out);
        out
    }
    fn binomial(a: u128, b: u128) -> u128 {
        let b = b.min(a - b);
        let mut acc: u128 = 1;
        for i in 1..=b {
            acc = acc * (a - b + i) / i;
        }
        acc
    }
    let mut checked = 0usize;
    for n in 1..=4usize {
        for levels in 1..=20u64 {
            if 10_000 % levels != 0 {
                continue;
            }
            let step = (10_000 / levels) as u32;
            let grid = action_space::weight_grid_vectors(step, n).unwrap();
            let expect = binomial((levels + n as u64 - 1) as u128, (n - 1) as u128);
            assert_eq!(grid.size() as u128, expect, "n={n} levels={levels}");
            let all = enumerate_all(levels as u32, n);
            assert_eq!(all.len() as u64, grid.size());
            for (rank, expect_units) in all.iter().enumerate() {
                let got = grid.unrank(rank as u64);
                let scaled: Vec<u32> = expect_units.iter().map(|&u| u * step).collect();
                assert_eq!(got.weights_bp, scaled);
            }
            checked += 1;
        }
    }

    // end-to-end: one rising and one falling asset, the all-in vector wins
    let t = 80;
    let mut returns = Array2::<f64>::zeros((t, 2));
    for r in 0..t {
        returns[[r, 0]] = 0.002;
        returns[[r, 1]] = -0.002;
    }
    let rp = return_panel(returns);
    let reference = action_space::reference_returns(&rp, action_space::ReferenceSeries::Asset(0));
    let labeling = action_space::updown_points(&reference, 20, 0.001).unwrap();
    let intervals = action_space::updown_intervals(&labeling, 20).unwrap();
    let set = action_space::extract_action_set(
        &intervals,
        &rp,
        &ActionExtractConfig {
            grid_step_bp: 5000,
            top_per_interval: 1,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(set.actions[0].weights_bp, vec![10_000, 0]);
    println!(
        "criterion 05: PASS - {checked} grids match stars-and-bars + enumeration; dominant-asset pipeline returns all-in vector"
    );
}

/// Criterion 6: Markowitz matches the closed-form tangency (1e-4) and n=3
/// grid brute force (1e-4 Sharpe); risk parity equalizes contributions to
/// 1e-8 on 100 random covariances. Runtime <= 60 s.
#[test]
fn criterion_06_benchmark_optimality() {
    let started = Instant::now();
    // closed-form tangency on uncorrelated two-asset cases
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut worst_w = 0.0f64;
    for _ in 0..20 {
        let mu = [rng.random_range(0.02..0.2), rng.random_range(0.01..0.15)];
        let sig = [rng.random_range(0.1..0.4), rng.random_range(0.1..0.4)];
        let cov = arr2(&[[sig[0] * sig[0], 0.0], [0.0, sig[1] * sig[1]]]);
        let m = MomentEstimates::new(mu.to_vec(), cov, 252).unwrap();
        let w = markowitz_weights(&m).unwrap().weights;
        let raw = [mu[0] / (sig[0] * sig[0]), mu[1] / (sig[1] * sig[1])];
        let expect = [raw[0] / (raw[0] + raw[1]), raw[1] / (raw[0] + raw[1])];
        for i in 0..2 {
            let err = (w[i] - expect[i]).abs();
            worst_w = worst_w.max(err);
            assert!(err <= 1e-4, "weight {i}: {} vs {}", w[i], expect[i]);
        }
    }

    // grid brute force at 0.5% resolution on random 3-asset moments
    let mut worst_sharpe_gap = f64::NEG_INFINITY;
    for _ in 0..10 {
        let a = Array2::from_shape_fn((3, 3), |_| rng.random_range(-0.3..0.3f64));
        let mut cov = Array2::<f64>::zeros((3, 3));
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a[[i, k]] * a[[j, k]];
                }
                cov[[i, j]] = acc;
            }
            cov[[i, i]] += 0.01;
        }
        let mu: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..0.15)).collect();
        let sharpe = |w: &[f64]| -> f64 {
            let mean: f64 = w.iter().zip(&mu).map(|(a, b)| a * b).sum();
            let mut var = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    var += w[i] * cov[[i, j]] * w[j];
                }
            }
            mean / var.sqrt()
        };
        let m = MomentEstimates::new(mu.clone(), cov.clone(), 252).unwrap();
        let solver = sharpe(&markowitz_weights(&m).unwrap().weights);
        let steps = 200;
        let mut best = f64::NEG_INFINITY;
        for a in 0..=steps {
            for b in 0..=(steps - a) {
                let w = [
                    a as f64 / steps as f64,
                    b as f64 / steps as f64,
                    (steps - a - b) as f64 / steps as f64,
                ];
                best = best.max(sharpe(&w));
            }
        }
        worst_sharpe_gap = worst_sharpe_gap.max(best - solver);
        assert!(solver >= best - 1e-4, "solver {solver} vs grid {best}");
    }

    // equal risk contributions on 100 random covariances
    let mut worst_rc = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(2..9usize);
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
            cov[[i, i]] += 0.005;
        }
        let m = MomentEstimates::new(vec![0.0; n], cov.clone(), 252).unwrap();
        let w = risk_parity_weights(&m).unwrap().weights;
        let rc = mcpm_core::benchmarks::risk_contributions(&cov, &w);
        for c in rc {
            let err = (c - 1.0 / n as f64).abs();
            worst_rc = worst_rc.max(err);
            assert!(err <= 1e-8, "risk contribution err {err}");
        }
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() <= 60.0, "took {elapsed:?}");
    println!(
        "criterion 06: PASS - tangency err {worst_w:.2e} (<=1e-4), grid gap {worst_sharpe_gap:.2e} (<=1e-4), RC err {worst_rc:.2e} (<=1e-8), {elapsed:?}"
    );
}

/// Criterion 7: metrics match brute-force recomputation to 1e-10 on 1000
/// random series, including the [100,110,99,121] drawdown case.
#[test]
fn criterion_07_metric_oracles() {
    assert!((evaluation::max_drawdown(&[100.0, 110.0, 99.0, 121.0]) - (-0.10)).abs() <= 1e-10);
    let mut rng = ChaCha8Rng::seed_from_u64(2020);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let len = rng.random_range(2..400usize);
        let daily: Vec<f64> = (0..len).map(|_| rng.random_range(-0.05..0.05)).collect();
        // brute-force oracles
        let mean: f64 = daily.iter().sum::<f64>() / len as f64;
        let r_oracle = mean * 252.0;
        let var: f64 =
            daily.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (len - 1) as f64;
        let v_oracle = var.sqrt() * 252f64.sqrt();
        let mut values = vec![1.0];
        let mut v = 1.0;
        for r in &daily {
            v *= 1.0 + r;
            values.push(v);
        }
        let mut mdd_oracle = 0.0f64;
        for i in 0..values.len() {
            for j in i..values.len() {
                mdd_oracle = mdd_oracle.min(values[j] / values[i] - 1.0);
            }
        }
        let cum_oracle = values[values.len() - 1] / values[0] - 1.0;

        let r = evaluation::annualized_return(&daily).unwrap();
        let vol = evaluation::annualized_volatility(&daily).unwrap();
        let mdd = evaluation::max_drawdown(&values);
        let cum = evaluation::cumulative_return(&values);
        for (got, expect) in [
            (r, r_oracle),
            (vol, v_oracle),
            (mdd, mdd_oracle),
            (cum, cum_oracle),
        ] {
            let err = (got - expect).abs();
            worst = worst.max(err);
            assert!(err <= 1e-10, "{got} vs {expect}");
        }
        if vol > 0.0 {
            let s = evaluation::sharpe(&daily).unwrap();
            let err = (s - r_oracle / v_oracle).abs();
            worst = worst.max(err);
            assert!(err <= 1e-10);
        }
    }
    println!("criterion 07: PASS - worst metric error {worst:.2e} (<=1e-10) over 1000 series");
}

fn micro_arch(rng: &mut ChaCha8Rng) -> NetArchitecture {
    // random micro-net under 200 parameters
    let obs_window = rng.random_range(6..10usize);
    let state_window = rng.random_range(8..12usize);
    let kernel = rng.random_range(2..4usize);
    NetArchitecture {
        n_assets: rng.random_range(1..3usize),
        obs_window,
        state_window,
        action_count: rng.random_range(2..4usize),
        fc_width: rng.random_range(2..4usize),
        obs_convs: vec![ConvSpec {
            out_channels: 2,
            in_channels: 1,
            kernel,
            stride: 2,
        }],
        state_convs: vec![ConvSpec {
            out_channels: 2,
            in_channels: 1,
            kernel,
            stride: 2,
        }],
    }
}

/// Criterion 8: analytic gradients match central finite differences
/// (h = 1e-5) with max relative error <= 1e-4 on 20 random micro-nets.
#[test]
fn criterion_08_gradient_correctness() {
    let cfg = TrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let arch = micro_arch(&mut rng);
        assert!(arch.param_count() <= 200, "{}", arch.param_count());
        let mut params = PolicyValueParams::init(arch.clone(), trial).unwrap();
        for v in &mut params.values {
            *v += rng.random_range(-0.3..0.3);
        }
        let len = rng.random_range(1..5usize);
        let steps: Vec<Transition> = (0..len)
            .map(|i| Transition {
                observation: Array2::from_shape_fn((arch.n_assets, arch.obs_window), |_| {
                    rng.random_range(-0.5..0.5)
                }),
                state: Array1::from_shape_fn(arch.state_window, |_| rng.random_range(-0.5..0.5)),
                action: rng.random_range(0..arch.action_count),
                reward: rng.random_range(-1.0..1.0),
                done: i == len - 1 && trial % 2 == 0,
            })
            .collect();
        let bootstrap = if steps.last().unwrap().done {
            None
        } else {
            Some((
                Array2::from_shape_fn((arch.n_assets, arch.obs_window), |_| {
                    rng.random_range(-0.5..0.5)
                }),
                Array1::from_shape_fn(arch.state_window, |_| rng.random_range(-0.5..0.5)),
            ))
        };
        let trajectory = Trajectory { steps, bootstrap };
        let (_, grad) = loss_and_gradients(&params, &trajectory, &cfg).unwrap();
        let (returns, advantages) = advantage_targets(&params, &trajectory, &cfg).unwrap();
        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for i in 0..params.values.len() {
            let mut plus = params.clone();
            plus.values[i] += h;
            let mut minus = params.clone();
            minus.values[i] -= h;
            let lp =
                frozen_surrogate_loss(&plus, &trajectory, &cfg, &returns, &advantages).unwrap();
            let lm =
                frozen_surrogate_loss(&minus, &trajectory, &cfg, &returns, &advantages).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let denom = grad[i].abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max((grad[i] - fd).abs() / denom);
        }
        worst = worst.max(max_rel);
        assert!(max_rel <= 1e-4, "micro-net {trial}: max rel err {max_rel}");
    }
    println!("criterion 08: PASS - worst relative gradient error {worst:.2e} (<=1e-4) over 20 micro-nets");
}

/// Sharpe with an explicit convention for zero volatility: 0 for a flat
/// series, signed infinity when the mean is nonzero (the deterministic toy
/// market produces exactly constant portfolio returns).
fn sharpe_or_limit(prs: &[f64]) -> f64 {
    let mean = prs.iter().sum::<f64>() / prs.len() as f64;
    match evaluation::sharpe(prs) {
        Ok(s) => s,
        Err(_) if mean.abs() < 1e-15 => 0.0,
        Err(_) => f64::INFINITY * mean.signum(),
    }
}

/// Criterion 9: on the deterministic two-asset market (+0.1%/-0.1% daily) a
/// 200k-step synchronous run beats equal weight on a held-out episode and
/// puts >= 0.9 of the maximum grid weight on the rising asset.
/// Runtime <= 10 min.
#[test]
fn criterion_09_learning_sanity() {
    let started = Instant::now();
    let t = 200;
    let returns = Array2::from_shape_fn((t, 2), |(_, i)| if i == 0 { 0.001 } else { -0.001 });
    let action_set = toy_action_set(
        vec![vec![10_000, 0], vec![5_000, 5_000], vec![0, 10_000]],
        5000,
    );
    let env_cfg = EnvConfig {
        obs_window: 60,
        state_window: 120,
        decision_stride: 1,
        episode_horizon: 119,
        reward_mode: RewardMode::Trailing,
        cost_bps: 0.0,
    };
    let factory = EnvFactory::from_returns(
        vec![returns.clone()],
        Arc::clone(&action_set),
        env_cfg.clone(),
        4,
    )
    .unwrap();
    let arch = NetArchitecture::reference(2, action_set.len());
    let cfg = TrainConfig {
        total_env_steps: 200_000,
        workers: 4,
        seed: 7,
        mode: TrainMode::Synchronous,
        ..Default::default()
    };
    let params = agent::train(&factory, arch, &cfg).unwrap();

    // held-out episode under the deterministic policy
    let mut env = PortfolioEnv::new(returns.clone(), Arc::clone(&action_set), env_cfg);
    let mut out = env.reset(59).unwrap();
    let mut weight_on_riser = Vec::new();
    while !out.done {
        let (policy, _) = agent::forward(&params, &out.observation.values, &out.state).unwrap();
        let mut action = 0;
        for (i, &p) in policy.iter().enumerate() {
            if p > policy[action] {
                action = i;
            }
        }
        weight_on_riser.push(action_set.actions[action].fractions()[0]);
        out = env.step(action).unwrap();
    }
    let policy_sharpe = sharpe_or_limit(env.episode_returns());

    let mut ew_env = PortfolioEnv::new(
        returns,
        Arc::new(ActionSet {
            actions: vec![WeightVector {
                weights_bp: vec![5_000, 5_000],
            }],
            provenance: action_set.provenance[..1].to_vec(),
            n_assets: 2,
            grid_step_bp: 5000,
        }),
        EnvConfig {
            episode_horizon: 119,
            ..Default::default()
        },
    );
    let mut out = ew_env.reset(59).unwrap();
    while !out.done {
        out = ew_env.step(0).unwrap();
    }
    let ew_sharpe = sharpe_or_limit(ew_env.episode_returns());

    let mean_weight = weight_on_riser.iter().sum::<f64>() / weight_on_riser.len() as f64;
    assert!(
        policy_sharpe > ew_sharpe,
        "policy sharpe {policy_sharpe} vs equal weight {ew_sharpe}"
    );
    assert!(
        mean_weight >= 0.9,
        "mean weight on rising asset {mean_weight} < 0.9 of grid max"
    );
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() <= 600.0, "took {elapsed:?}");
    println!(
        "criterion 09: PASS - policy sharpe {policy_sharpe:.2} > equal weight {ew_sharpe:.2}, mean rising-asset weight {mean_weight:.3} (>=0.9), {elapsed:?}"
    );
}

fn write_synthetic_panel(path: &Path, t: usize, seed: u64) {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        normal.inverse_cdf(((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64))
    };
    let dates =
        market_data::synthetic_dates(chrono::NaiveDate::from_ymd_opt(2010, 1, 4).unwrap(), t);
    let mut prices = vec![(100.0f64, 80.0f64)];
    for step in 0..t - 1 {
        let rho: f64 = if (step / 375) % 2 == 0 { 0.7 } else { -0.3 };
        let drift = if (step / 150) % 2 == 0 { 0.0008 } else { -0.0005 };
        let z1 = draw(&mut rng);
        let z2 = draw(&mut rng);
        let r1 = drift + 0.011 * z1;
        let r2 = 0.0002 + 0.009 * (rho * z1 + (1.0 - rho * rho).sqrt() * z2);
        let (a, b) = *prices.last().unwrap();
        prices.push((a * (1.0 + r1), b * (1.0 + r2)));
    }
    let mut out = String::from("date,AAA,BBB\n");
    for (date, (a, b)) in dates.iter().zip(&prices) {
        out.push_str(&format!("{date},{a},{b}\n"));
    }
    std::fs::write(path, out).unwrap();
}

fn collect_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

/// Criterion 10: analyze -> train (K=2, M=1, tiny budget) -> backtest on a
/// 1500-day synthetic panel completes through the binary, emits reports
/// with all four strategy column groups, and two runs with the same seed
/// are byte-identical. Runtime <= 15 min.
#[test]
fn criterion_10_end_to_end_pipeline() {
    let started = Instant::now();
    let bin = env!("CARGO_BIN_EXE_mcpm");
    let work = std::env::temp_dir().join(format!("mcpm_accept_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&work);
    std::fs::create_dir_all(&work).unwrap();
    write_synthetic_panel(&work.join("prices.csv"), 1500, 99);
    let config = r#"
[data]
path = "prices.csv"
price_columns = ["AAA", "BBB"]

[rcme]
k = 2
stride = 2

[simulator]
n_paths = 4
horizon = 220
base_seed = 5

[action_space]
grid_step_bp = 5000
alpha = 0.0003
sample_floor = 10

[env]
episode_horizon = 100

[train]
total_env_steps = 2000
workers = 2
models_per_representative = 1
seed = 9

[benchmarks]
moment_window = 126

[evaluation]
management_horizon = 126
fixed_starts = ["2012-06-01", "2013-06-03"]
rolling_periods = [["2013-01-07", "2013-01-11"]]
"#;
    std::fs::write(work.join("config.toml"), config).unwrap();

    let run_pipeline = |out_dir: &str| -> PathBuf {
        let out = work.join(out_dir);
        for sub in ["analyze", "train", "backtest"] {
            let status = Command::new(bin)
                .current_dir(&work)
                .args([sub, "--config", "config.toml", "--out"])
                .arg(&out)
                .output()
                .unwrap();
            assert!(
                status.status.success(),
                "{sub} failed: {}\n{}",
                String::from_utf8_lossy(&status.stdout),
                String::from_utf8_lossy(&status.stderr)
            );
        }
        out
    };
    let out1 = run_pipeline("out1");
    let out2 = run_pipeline("out2");

    let fixed = std::fs::read_to_string(out1.join("backtest_fixed.txt")).unwrap();
    for group in ["Markowitz", "Risk Budgeting", "Equal Weight", "Model"] {
        assert!(fixed.contains(group), "missing column group {group}");
    }
    assert!(fixed.contains("Mean"));
    assert!(out1.join("backtest_rolling.txt").exists());
    assert!(out1.join("model_pool.bin").exists());

    let files1 = collect_files(&out1);
    let files2 = collect_files(&out2);
    assert_eq!(
        files1.keys().collect::<Vec<_>>(),
        files2.keys().collect::<Vec<_>>()
    );
    for (name, bytes) in &files1 {
        assert_eq!(
            Some(bytes),
            files2.get(name),
            "file {name} differs between runs"
        );
    }
    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() <= 900.0, "took {elapsed:?}");
    let _ = std::fs::remove_dir_all(&work);
    println!(
        "criterion 10: PASS - pipeline reproducible over {} files, all four strategy groups present, {elapsed:?}",
        files1.len()
    );
}

/// Criterion 11: over 1000 random action sequences the final portfolio value
/// equals the compounded product of daily returns to 1e-10 relative, and the
/// state/observation alignment invariants hold at every step.
#[test]
fn criterion_11_environment_accounting() {
    let mut rng = ChaCha8Rng::seed_from_u64(20_201);
    let action_set = toy_action_set(
        vec![
            vec![10_000, 0, 0],
            vec![0, 10_000, 0],
            vec![0, 0, 10_000],
            vec![4_000, 3_000, 3_000],
            vec![2_500, 2_500, 5_000],
        ],
        2500,
    );
    let mut worst_rel = 0.0f64;
    for sequence in 0..1000 {
        let t = rng.random_range(130..220usize);
        let returns = Array2::from_shape_fn((t, 3), |_| rng.random_range(-0.03..0.03));
        let stride = rng.random_range(1..5usize);
        let horizon = rng.random_range(20..t - 61);
        let mut env = PortfolioEnv::new(
            returns.clone(),
            Arc::clone(&action_set),
            EnvConfig {
                decision_stride: stride,
                episode_horizon: horizon,
                ..Default::default()
            },
        );
        let mut out = env.reset(59).unwrap();
        while !out.done {
            out = env.step(rng.random_range(0..5)).unwrap();
            let time = env.current_time();
            let pr = *env.episode_returns().last().unwrap();
            assert_eq!(out.state[119], pr, "sequence {sequence}: state misaligned");
            for i in 0..3 {
                assert_eq!(
                    out.observation.values[[i, 59]],
                    returns[[time, i]],
                    "sequence {sequence}: observation misaligned"
                );
            }
        }
        let product: f64 = env.episode_returns().iter().map(|r| 1.0 + r).product();
        let rel = (env.portfolio_value() - product).abs() / product.abs();
        worst_rel = worst_rel.max(rel);
        assert!(rel <= 1e-10, "sequence {sequence}: rel err {rel}");
    }
    println!(
        "criterion 11: PASS - worst accounting error {worst_rel:.2e} (<=1e-10) over 1000 sequences"
    );
}
