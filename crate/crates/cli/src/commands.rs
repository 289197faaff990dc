//! The pipeline subcommands. Each one is a pure function of the config file
//! and the input artifacts: re-running with the same inputs produces
//! byte-identical outputs (synchronous training mode).

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Days;

use mcpm_core::action_space::{self, ActionSet};
use mcpm_core::agent::{self, ModelPool, PoolBuildConfig};
use mcpm_core::evaluation::{self, BacktestReport, ExperimentSpec, RunOptions, Strategy};
use mcpm_core::market_data::{self, AssetPanel, ReturnPanel};
use mcpm_core::rcme::{self, RepresentativeSet};
use mcpm_core::simulator;

use crate::config::ExperimentConfig;

/// Exit code 2: configuration, input, or artifact problems.
/// Exit code 1: runtime failures (training, strategy errors).
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn validation(msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(msg.to_string())
}

fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

pub fn representatives_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("representatives.txt")
}

pub fn action_set_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("action_set.txt")
}

pub fn pool_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.output_dir.join("model_pool.bin")
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| validation(format!("cannot create {}: {e}", cfg.output_dir.display())))
}

fn load_panel(cfg: &ExperimentConfig) -> Result<AssetPanel> {
    market_data::load_price_panel(&cfg.data_path, &cfg.schema)
        .map_err(|e| validation(format!("{}: {e}", cfg.data_path.display())))
}

fn load_representatives(cfg: &ExperimentConfig) -> Result<RepresentativeSet> {
    let path = representatives_path(cfg);
    RepresentativeSet::read_file(&path)
        .map_err(|e| validation(format!("{}: {e} (run `analyze` first)", path.display())))
}

fn write_out(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| validation(format!("{}: {e}", path.display())))
}

/// `analyze`: rolling correlations, clustering, representative extraction.
/// Writes the representative-set artifact and a regime report.
pub fn cmd_analyze(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let panel = load_panel(cfg)?;
    let rp = market_data::daily_returns(&panel);
    let cms = rcme::build_cms(&rp, cfg.rcme_window, cfg.rcme_stride).map_err(runtime)?;
    let cmdm = rcme::build_cmdm(&cms).map_err(runtime)?;
    let dendrogram = rcme::agglomerate(&cmdm, cfg.linkage);
    let k = cfg.k_regimes.min(cms.len());
    if k < cfg.k_regimes {
        eprintln!(
            "note: rcme.k = {} capped to {} (size of the correlation matrix set)",
            cfg.k_regimes, k
        );
    }
    let assignment = dendrogram.cut(k).map_err(runtime)?;
    let rs = rcme::representative_matrices(&assignment, &cms, cfg.linkage).map_err(runtime)?;
    rs.write_file(&representatives_path(cfg)).map_err(runtime)?;

    let mut report = String::new();
    report.push_str(&format!(
        "regimes {} window {} stride {} linkage {} matrices {}\n",
        k,
        cfg.rcme_window,
        cfg.rcme_stride,
        cfg.linkage.as_str(),
        cms.len()
    ));
    report.push_str("cluster sizes:");
    for (i, members) in assignment.member_indices.iter().enumerate() {
        report.push_str(&format!(" [{i}] {}", members.len()));
    }
    report.push('\n');
    report.push_str("top dendrogram merge heights (ascending):");
    for h in dendrogram.top_heights(10) {
        report.push_str(&format!(" {h:.6}"));
    }
    report.push('\n');
    write_out(&cfg.output_dir.join("regime_report.txt"), report.as_bytes())?;
    print!("{report}");
    println!("wrote {}", representatives_path(cfg).display());
    Ok(())
}

/// Per-representative base seed, offset so datasets never share streams.
fn rep_base_seed(cfg: &ExperimentConfig, rep: usize) -> u64 {
    cfg.sim
        .base_seed
        .wrapping_add((rep * cfg.sim.n_paths) as u64)
}

/// `simulate`: dump the per-representative simulated panels as CSV files.
pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let panel = load_panel(cfg)?;
    let rp = market_data::daily_returns(&panel);
    let rs = load_representatives(cfg)?;
    let sim_dir = cfg.output_dir.join("sim");
    fs::create_dir_all(&sim_dir)
        .map_err(|e| validation(format!("{}: {e}", sim_dir.display())))?;
    let mut count = 0usize;
    for rep in 0..rs.k() {
        let sim = simulator::SimConfig {
            base_seed: rep_base_seed(cfg, rep),
            ..cfg.sim.clone()
        };
        let dataset = simulator::generate_dataset(rep, &rs, &rp, &sim).map_err(runtime)?;
        for panel in dataset {
            let path = sim_dir.join(format!("sim_{rep}_{}.csv", panel.seed));
            let file = fs::File::create(&path)
                .map_err(|e| validation(format!("{}: {e}", path.display())))?;
            panel
                .write_csv(std::io::BufWriter::new(file), ',')
                .map_err(runtime)?;
            count += 1;
        }
    }
    println!("wrote {count} simulated panels to {}", sim_dir.display());
    Ok(())
}

fn extract_actions(cfg: &ExperimentConfig, rp: &ReturnPanel) -> Result<ActionSet> {
    let reference = action_space::reference_returns(rp, cfg.reference);
    let labeling =
        action_space::updown_points(&reference, cfg.k_window, cfg.alpha).map_err(runtime)?;
    let intervals = action_space::updown_intervals(&labeling, cfg.min_len).map_err(runtime)?;
    action_space::extract_action_set(&intervals, rp, &cfg.action).map_err(runtime)
}

/// `train`: extract the action set, build the model pool, persist both plus
/// the training-curve log.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let panel = load_panel(cfg)?;
    let rp = market_data::daily_returns(&panel);
    let rs = load_representatives(cfg)?;
    let action_set = extract_actions(cfg, &rp)?;
    action_set
        .write_file(&action_set_path(cfg))
        .map_err(runtime)?;
    println!(
        "action set: {} actions on a {} bp grid -> {}",
        action_set.len(),
        action_set.grid_step_bp,
        action_set_path(cfg).display()
    );

    let pool_cfg = PoolBuildConfig {
        models_per_rep: cfg.models_per_rep,
        train: cfg.train.clone(),
        sim: cfg.sim.clone(),
        env: cfg.env.clone(),
    };
    let pool = agent::build_model_pool(&rs, &rp, Arc::new(action_set), &pool_cfg)
        .map_err(|e| runtime(format!("model pool build failed: {e}")))?;
    for failure in &pool.failures {
        eprintln!("warning: {failure}");
    }
    pool.write_file(&pool_path(cfg)).map_err(runtime)?;
    write_out(
        &cfg.output_dir.join("model_pool_meta.txt"),
        pool.metadata_text().as_bytes(),
    )?;

    let mut log = String::from("rep,model,seed,round,env_steps,mean_loss,mean_reward\n");
    for sub in &pool.sub_pools {
        for model in &sub.models {
            for point in &model.log {
                log.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    sub.rep_index,
                    model.meta.model_index,
                    model.meta.seed,
                    point.round,
                    point.env_steps,
                    point.mean_loss,
                    point.mean_reward
                ));
            }
        }
    }
    write_out(&cfg.output_dir.join("training_log.csv"), log.as_bytes())?;
    println!(
        "model pool: {} sub-pools, {} models -> {}",
        pool.sub_pools.len(),
        pool.model_count(),
        pool_path(cfg).display()
    );
    Ok(())
}

struct LoadedModel {
    pool: ModelPool,
    representatives: RepresentativeSet,
    action_set: ActionSet,
}

fn load_model_artifacts(cfg: &ExperimentConfig) -> Result<LoadedModel> {
    let pool = ModelPool::read_file(&pool_path(cfg))
        .map_err(|e| validation(format!("{}: {e} (run `train` first)", pool_path(cfg).display())))?;
    let representatives = load_representatives(cfg)?;
    let action_set = ActionSet::read_file(&action_set_path(cfg)).map_err(|e| {
        validation(format!(
            "{}: {e} (run `train` first)",
            action_set_path(cfg).display()
        ))
    })?;
    if pool.arch.action_count != action_set.len() {
        return Err(validation(format!(
            "model pool expects {} actions, action set has {}",
            pool.arch.action_count,
            action_set.len()
        )));
    }
    Ok(LoadedModel {
        pool,
        representatives,
        action_set,
    })
}

fn write_report_files(
    cfg: &ExperimentConfig,
    report: &BacktestReport,
    stem: &str,
) -> Result<()> {
    let table = evaluation::render_table(report);
    write_out(
        &cfg.output_dir.join(format!("{stem}.txt")),
        table.as_bytes(),
    )?;
    let mut csv = Vec::new();
    evaluation::write_csv(report, &mut csv).map_err(runtime)?;
    write_out(&cfg.output_dir.join(format!("{stem}.csv")), &csv)?;
    if cfg.dump_equity_curves {
        let dir = cfg.output_dir.join("equity");
        fs::create_dir_all(&dir).map_err(|e| validation(format!("{}: {e}", dir.display())))?;
        for row in &report.rows {
            for result in &row.results {
                for (w, path_values) in result.equity.iter().enumerate() {
                    let path = dir.join(format!(
                        "{stem}_{}_p{}_w{w}.csv",
                        result.strategy_id,
                        row.period_index + 1
                    ));
                    let mut out = String::from("t,value\n");
                    for (t, v) in path_values.iter().enumerate() {
                        out.push_str(&format!("{t},{v}\n"));
                    }
                    write_out(&path, out.as_bytes())?;
                }
            }
        }
    }
    Ok(())
}

/// `backtest`: run the fixed and rolling harnesses for every configured
/// strategy and write the Table-2/Table-3 style reports.
pub fn cmd_backtest(cfg: &ExperimentConfig) -> Result<()> {
    ensure_out_dir(cfg)?;
    let panel = load_panel(cfg)?;
    let wants_model = cfg.strategies.iter().any(|s| s == "model");
    let loaded = if wants_model {
        Some(load_model_artifacts(cfg)?)
    } else {
        None
    };

    let strategies: Vec<Strategy<'_>> = cfg
        .strategies
        .iter()
        .map(|s| match s.as_str() {
            "equal_weight" => Strategy::EqualWeight,
            "markowitz" => Strategy::Markowitz {
                moment_window: cfg.moment_window,
            },
            "risk_budgeting" => Strategy::RiskParity {
                moment_window: cfg.moment_window,
            },
            "model" => {
                let l = loaded.as_ref().expect("loaded when requested");
                Strategy::Model {
                    pool: &l.pool,
                    representatives: &l.representatives,
                    action_set: &l.action_set,
                }
            }
            other => unreachable!("validated strategy `{other}`"),
        })
        .collect();

    let opts = RunOptions {
        decision_stride: cfg.env.decision_stride,
        collect_equity: cfg.dump_equity_curves,
    };

    let mut any_failure = false;
    if !cfg.fixed_starts.is_empty() {
        // nominal label end: horizon trading days at ~5 per 7 calendar days
        let label_days = (cfg.management_horizon as u64 * 7).div_ceil(5);
        let spec = ExperimentSpec {
            periods: cfg
                .fixed_starts
                .iter()
                .map(|&d| (d, d.checked_add_days(Days::new(label_days)).unwrap_or(d)))
                .collect(),
            management_horizon: cfg.management_horizon,
            rolling: false,
        };
        let report =
            evaluation::run_backtest(&strategies, &panel, &spec, &opts).map_err(runtime)?;
        any_failure |= report
            .rows
            .iter()
            .any(|r| r.results.iter().any(|s| s.report.is_none()));
        print!("{}", evaluation::render_table(&report));
        write_report_files(cfg, &report, "backtest_fixed")?;
    }
    if !cfg.rolling_periods.is_empty() {
        let spec = ExperimentSpec {
            periods: cfg.rolling_periods.clone(),
            management_horizon: cfg.management_horizon,
            rolling: true,
        };
        let report =
            evaluation::run_daily_rolling(&strategies, &panel, &spec, &opts).map_err(runtime)?;
        any_failure |= report
            .rows
            .iter()
            .any(|r| r.results.iter().any(|s| s.report.is_none()));
        print!("{}", evaluation::render_table(&report));
        write_report_files(cfg, &report, "backtest_rolling")?;
    }
    println!("reports written to {}", cfg.output_dir.display());
    if any_failure {
        return Err(runtime("one or more strategy/period runs failed; see reports"));
    }
    Ok(())
}

/// `report`: re-render the text tables from the machine-readable reports.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<()> {
    let mut found = false;
    for (stem, rolling) in [("backtest_fixed", false), ("backtest_rolling", true)] {
        let path = cfg.output_dir.join(format!("{stem}.csv"));
        if !path.exists() {
            continue;
        }
        found = true;
        let file = fs::File::open(&path)
            .map_err(|e| validation(format!("{}: {e}", path.display())))?;
        let report = evaluation::read_csv(file, rolling, cfg.management_horizon)
            .map_err(|e| validation(format!("{}: {e}", path.display())))?;
        print!("{}", evaluation::render_table(&report));
    }
    if !found {
        return Err(validation(format!(
            "no backtest reports in {} (run `backtest` first)",
            cfg.output_dir.display()
        )));
    }
    Ok(())
}

