//! Experiment configuration: one TOML file with sections mirroring the core
//! modules. Every field is validated at load time; errors carry the
//! `section.field` path.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Deserialize;

use mcpm_core::action_space::{ActionExtractConfig, ReferenceSeries, TOTAL_BP};
use mcpm_core::agent::{TrainConfig, TrainMode};
use mcpm_core::market_data::PanelSchema;
use mcpm_core::portfolio_env::{EnvConfig, RewardMode};
use mcpm_core::rcme::Linkage;
use mcpm_core::simulator::SimConfig;

#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Result<T> = std::result::Result<T, ConfigError>;

fn err<T>(path: &str, msg: impl std::fmt::Display) -> Result<T> {
    Err(ConfigError(format!("{path}: {msg}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    data: RawData,
    #[serde(default)]
    rcme: RawRcme,
    #[serde(default)]
    simulator: RawSimulator,
    #[serde(default)]
    action_space: RawActionSpace,
    #[serde(default)]
    env: RawEnv,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    benchmarks: RawBenchmarks,
    #[serde(default)]
    evaluation: RawEvaluation,
    #[serde(default)]
    output: RawOutput,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    path: String,
    #[serde(default = "default_date_column")]
    date_column: String,
    price_columns: Vec<String>,
    #[serde(default = "default_delimiter")]
    delimiter: String,
}

fn default_date_column() -> String {
    "date".into()
}

fn default_delimiter() -> String {
    ",".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawRcme {
    window: usize,
    stride: usize,
    linkage: String,
    k: usize,
}

impl Default for RawRcme {
    fn default() -> Self {
        Self {
            window: 60,
            stride: 1,
            linkage: "average".into(),
            k: 5,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawSimulator {
    n_paths: usize,
    horizon: usize,
    dt: f64,
    base_seed: u64,
}

impl Default for RawSimulator {
    fn default() -> Self {
        Self {
            n_paths: 64,
            horizon: 756,
            dt: 1.0 / 252.0,
            base_seed: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawActionSpace {
    k_window: usize,
    alpha: f64,
    min_len: usize,
    grid_step_bp: u32,
    sample_fraction: f64,
    sample_floor: usize,
    k_control: f64,
    top_per_interval: usize,
    seed: u64,
    reference: String,
}

impl Default for RawActionSpace {
    fn default() -> Self {
        Self {
            k_window: 20,
            alpha: 0.001,
            min_len: 20,
            grid_step_bp: 1000,
            sample_fraction: 1e-4,
            sample_floor: 1000,
            k_control: 1.0,
            top_per_interval: 3,
            seed: 0,
            reference: "equal_weight".into(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawEnv {
    obs_window: usize,
    state_window: usize,
    decision_stride: usize,
    episode_horizon: usize,
    reward_mode: String,
    cost_bps: f64,
}

impl Default for RawEnv {
    fn default() -> Self {
        Self {
            obs_window: 60,
            state_window: 120,
            decision_stride: 1,
            episode_horizon: 252,
            reward_mode: "trailing".into(),
            cost_bps: 0.0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawTrain {
    gamma: f64,
    learning_rate: f64,
    entropy_coef: f64,
    value_coef: f64,
    rollout_len: usize,
    workers: usize,
    total_env_steps: usize,
    grad_clip: f64,
    seed: u64,
    mode: String,
    models_per_representative: usize,
}

impl Default for RawTrain {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            learning_rate: 3e-4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            rollout_len: 20,
            workers: 4,
            total_env_steps: 100_000,
            grad_clip: 0.5,
            seed: 0,
            mode: "synchronous".into(),
            models_per_representative: 4,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawBenchmarks {
    moment_window: usize,
}

impl Default for RawBenchmarks {
    fn default() -> Self {
        Self { moment_window: 252 }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawEvaluation {
    management_horizon: usize,
    fixed_starts: Vec<String>,
    rolling_periods: Vec<[String; 2]>,
    strategies: Vec<String>,
    dump_equity_curves: bool,
}

impl Default for RawEvaluation {
    fn default() -> Self {
        Self {
            management_horizon: 504,
            fixed_starts: [
                "2008-02-18",
                "2010-02-18",
                "2012-02-20",
                "2014-02-18",
                "2016-02-18",
                "2018-02-19",
                "2019-09-12",
            ]
            .map(String::from)
            .to_vec(),
            rolling_periods: [
                ["2008-02-18", "2010-02-18"],
                ["2010-02-18", "2012-02-18"],
                ["2012-02-18", "2014-02-18"],
                ["2014-02-18", "2016-02-18"],
                ["2016-02-18", "2018-02-18"],
                ["2018-02-18", "2019-02-18"],
            ]
            .map(|p| p.map(String::from))
            .to_vec(),
            strategies: ["markowitz", "risk_budgeting", "equal_weight", "model"]
                .map(String::from)
                .to_vec(),
            dump_equity_curves: false,
        }
    }
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
struct RawOutput {
    dir: Option<String>,
}

/// Validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub data_path: PathBuf,
    pub schema: PanelSchema,
    pub rcme_window: usize,
    pub rcme_stride: usize,
    pub linkage: Linkage,
    pub k_regimes: usize,
    pub sim: SimConfig,
    pub action: ActionExtractConfig,
    pub k_window: usize,
    pub alpha: f64,
    pub min_len: usize,
    pub reference: ReferenceSeries,
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub models_per_rep: usize,
    pub moment_window: usize,
    pub management_horizon: usize,
    pub fixed_starts: Vec<NaiveDate>,
    pub rolling_periods: Vec<(NaiveDate, NaiveDate)>,
    pub strategies: Vec<String>,
    pub dump_equity_curves: bool,
    pub output_dir: PathBuf,
}

fn parse_date(path: &str, s: &str) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|_| ConfigError(format!("{path}: bad date `{s}`, expected YYYY-MM-DD")))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
        let raw: RawConfig = toml::from_str(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_raw(raw, path.parent().unwrap_or(Path::new(".")))
    }

    fn from_raw(raw: RawConfig, base: &Path) -> Result<Self> {
        if raw.data.price_columns.len() < 2 {
            return err("data.price_columns", "need at least 2 price columns");
        }
        let delim = raw.data.delimiter.as_bytes();
        if delim.len() != 1 {
            return err("data.delimiter", "must be a single character");
        }
        let schema = PanelSchema::new(raw.data.date_column.clone(), raw.data.price_columns.clone())
            .with_delimiter(delim[0]);
        let data_path = {
            let p = PathBuf::from(&raw.data.path);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        if raw.rcme.window < 2 {
            return err("rcme.window", "must be at least 2");
        }
        if raw.rcme.stride == 0 {
            return err("rcme.stride", "must be at least 1");
        }
        if raw.rcme.k == 0 {
            return err("rcme.k", "must be at least 1");
        }
        let linkage = Linkage::parse(&raw.rcme.linkage).ok_or_else(|| {
            ConfigError(format!(
                "rcme.linkage: `{}` is not one of single|complete|average",
                raw.rcme.linkage
            ))
        })?;

        if raw.simulator.n_paths == 0 {
            return err("simulator.n_paths", "must be at least 1");
        }
        if raw.simulator.horizon == 0 {
            return err("simulator.horizon", "must be at least 1");
        }
        if !(raw.simulator.dt > 0.0) {
            return err("simulator.dt", "must be positive");
        }
        let sim = SimConfig {
            n_paths: raw.simulator.n_paths,
            horizon: raw.simulator.horizon,
            dt: raw.simulator.dt,
            base_seed: raw.simulator.base_seed,
        };

        if raw.action_space.k_window == 0 {
            return err("action_space.k_window", "must be at least 1");
        }
        if raw.action_space.alpha < 0.0 {
            return err("action_space.alpha", "must be non-negative");
        }
        if raw.action_space.min_len == 0 {
            return err("action_space.min_len", "must be at least 1");
        }
        if raw.action_space.grid_step_bp == 0 || TOTAL_BP % raw.action_space.grid_step_bp != 0 {
            return err(
                "action_space.grid_step_bp",
                format!("must divide {TOTAL_BP}"),
            );
        }
        if !(raw.action_space.sample_fraction > 0.0 && raw.action_space.sample_fraction <= 1.0) {
            return err("action_space.sample_fraction", "must be in (0, 1]");
        }
        if raw.action_space.top_per_interval == 0 {
            return err("action_space.top_per_interval", "must be at least 1");
        }
        let reference = if raw.action_space.reference == "equal_weight" {
            ReferenceSeries::EqualWeight
        } else if let Some(name) = raw.action_space.reference.strip_prefix("asset:") {
            let idx = raw
                .data
                .price_columns
                .iter()
                .position(|c| c == name)
                .ok_or_else(|| {
                    ConfigError(format!(
                        "action_space.reference: asset `{name}` not in data.price_columns"
                    ))
                })?;
            ReferenceSeries::Asset(idx)
        } else {
            return err(
                "action_space.reference",
                "must be `equal_weight` or `asset:<column>`",
            );
        };
        let action = ActionExtractConfig {
            grid_step_bp: raw.action_space.grid_step_bp,
            sample_fraction: raw.action_space.sample_fraction,
            sample_floor: raw.action_space.sample_floor,
            k_control: raw.action_space.k_control,
            top_per_interval: raw.action_space.top_per_interval,
            seed: raw.action_space.seed,
        };

        if raw.env.obs_window == 0 {
            return err("env.obs_window", "must be at least 1");
        }
        if raw.env.state_window < 2 {
            return err("env.state_window", "must be at least 2");
        }
        if raw.env.decision_stride == 0 {
            return err("env.decision_stride", "must be at least 1");
        }
        if raw.env.episode_horizon == 0 {
            return err("env.episode_horizon", "must be at least 1");
        }
        let reward_mode = match raw.env.reward_mode.as_str() {
            "trailing" => RewardMode::Trailing,
            "terminal" => RewardMode::Terminal,
            other => {
                return err(
                    "env.reward_mode",
                    format!("`{other}` is not trailing|terminal"),
                )
            }
        };
        let env = EnvConfig {
            obs_window: raw.env.obs_window,
            state_window: raw.env.state_window,
            decision_stride: raw.env.decision_stride,
            episode_horizon: raw.env.episode_horizon,
            reward_mode,
            cost_bps: raw.env.cost_bps,
        };

        if !(raw.train.gamma > 0.0 && raw.train.gamma <= 1.0) {
            return err("train.gamma", "must be in (0, 1]");
        }
        if !(raw.train.learning_rate > 0.0) {
            return err("train.learning_rate", "must be positive");
        }
        if raw.train.rollout_len == 0 {
            return err("train.rollout_len", "must be at least 1");
        }
        if raw.train.workers == 0 {
            return err("train.workers", "must be at least 1");
        }
        if raw.train.models_per_representative == 0 {
            return err("train.models_per_representative", "must be at least 1");
        }
        let mode = match raw.train.mode.as_str() {
            "synchronous" => TrainMode::Synchronous,
            "asynchronous" => TrainMode::Asynchronous,
            other => {
                return err(
                    "train.mode",
                    format!("`{other}` is not synchronous|asynchronous"),
                )
            }
        };
        let train = TrainConfig {
            gamma: raw.train.gamma,
            learning_rate: raw.train.learning_rate,
            entropy_coef: raw.train.entropy_coef,
            value_coef: raw.train.value_coef,
            rollout_len: raw.train.rollout_len,
            workers: raw.train.workers,
            total_env_steps: raw.train.total_env_steps,
            grad_clip: raw.train.grad_clip,
            seed: raw.train.seed,
            mode,
        };

        if raw.benchmarks.moment_window < 2 {
            return err("benchmarks.moment_window", "must be at least 2");
        }

        if raw.evaluation.management_horizon == 0 {
            return err("evaluation.management_horizon", "must be at least 1");
        }
        if raw.evaluation.fixed_starts.is_empty() && raw.evaluation.rolling_periods.is_empty() {
            return err(
                "evaluation.fixed_starts",
                "need at least one fixed start or rolling period",
            );
        }
        let fixed_starts = raw
            .evaluation
            .fixed_starts
            .iter()
            .map(|s| parse_date("evaluation.fixed_starts", s))
            .collect::<Result<Vec<_>>>()?;
        let rolling_periods = raw
            .evaluation
            .rolling_periods
            .iter()
            .map(|[a, b]| {
                let start = parse_date("evaluation.rolling_periods", a)?;
                let end = parse_date("evaluation.rolling_periods", b)?;
                if end < start {
                    return err("evaluation.rolling_periods", format!("{a} after {b}"));
                }
                Ok((start, end))
            })
            .collect::<Result<Vec<_>>>()?;
        let known = ["markowitz", "risk_budgeting", "equal_weight", "model"];
        for s in &raw.evaluation.strategies {
            if !known.contains(&s.as_str()) {
                return err(
                    "evaluation.strategies",
                    format!("`{s}` is not one of {known:?}"),
                );
            }
        }
        if raw.evaluation.strategies.is_empty() {
            return err("evaluation.strategies", "need at least one strategy");
        }

        let output_dir = {
            let p = PathBuf::from(raw.output.dir.unwrap_or_else(|| "out".into()));
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };

        Ok(Self {
            data_path,
            schema,
            rcme_window: raw.rcme.window,
            rcme_stride: raw.rcme.stride,
            linkage,
            k_regimes: raw.rcme.k,
            sim,
            action,
            k_window: raw.action_space.k_window,
            alpha: raw.action_space.alpha,
            min_len: raw.action_space.min_len,
            reference,
            env,
            train,
            models_per_rep: raw.train.models_per_representative,
            moment_window: raw.benchmarks.moment_window,
            management_horizon: raw.evaluation.management_horizon,
            fixed_starts,
            rolling_periods,
            strategies: raw.evaluation.strategies,
            dump_equity_curves: raw.evaluation.dump_equity_curves,
            output_dir,
        })
    }

    /// `--seed` override: re-seeds every stochastic stage from one master
    /// seed with fixed offsets.
    pub fn override_seed(&mut self, seed: u64) {
        self.sim.base_seed = seed;
        self.action.seed = seed.wrapping_add(1000);
        self.train.seed = seed.wrapping_add(2000);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal(extra: &str) -> String {
        format!(
            "[data]\npath = \"prices.csv\"\nprice_columns = [\"A\", \"B\"]\n{extra}"
        )
    }

    fn load_str(text: &str) -> Result<ExperimentConfig> {
        let raw: RawConfig =
            toml::from_str(text).map_err(|e| ConfigError(format!("parse: {e}")))?;
        ExperimentConfig::from_raw(raw, Path::new("/tmp"))
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = load_str(&minimal("")).unwrap();
        assert_eq!(cfg.rcme_window, 60);
        assert_eq!(cfg.k_regimes, 5);
        assert_eq!(cfg.sim.n_paths, 64);
        assert_eq!(cfg.train.workers, 4);
        assert_eq!(cfg.management_horizon, 504);
        assert_eq!(cfg.fixed_starts.len(), 7);
        assert_eq!(cfg.rolling_periods.len(), 6);
        assert_eq!(cfg.strategies.len(), 4);
        assert!(cfg.output_dir.ends_with("out"));
    }

    #[test]
    fn field_paths_in_errors() {
        let e = load_str(&minimal("[rcme]\nwindow = 1\n")).unwrap_err();
        assert!(e.0.contains("rcme.window"), "{}", e.0);
        let e = load_str(&minimal("[action_space]\ngrid_step_bp = 3\n")).unwrap_err();
        assert!(e.0.contains("action_space.grid_step_bp"), "{}", e.0);
        let e = load_str(&minimal("[evaluation]\nfixed_starts = [\"2020-13-01\"]\n"))
            .unwrap_err();
        assert!(e.0.contains("evaluation.fixed_starts"), "{}", e.0);
        let e = load_str(&minimal("[train]\nmode = \"sideways\"\n")).unwrap_err();
        assert!(e.0.contains("train.mode"), "{}", e.0);
        let e = load_str(&minimal(
            "[evaluation]\nfixed_starts = []\nrolling_periods = []\n",
        ))
        .unwrap_err();
        assert!(e.0.contains("evaluation.fixed_starts"), "{}", e.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = load_str(&minimal("[rcme]\nwidnow = 60\n")).unwrap_err();
        assert!(e.0.contains("widnow"), "{}", e.0);
    }

    #[test]
    fn seed_override_touches_every_stage() {
        let mut cfg = load_str(&minimal("")).unwrap();
        cfg.override_seed(42);
        assert_eq!(cfg.sim.base_seed, 42);
        assert_eq!(cfg.action.seed, 1042);
        assert_eq!(cfg.train.seed, 2042);
    }

    #[test]
    fn reference_series_parsing() {
        let cfg = load_str(&minimal("[action_space]\nreference = \"asset:B\"\n")).unwrap();
        assert_eq!(cfg.reference, ReferenceSeries::Asset(1));
        let e = load_str(&minimal("[action_space]\nreference = \"asset:Z\"\n")).unwrap_err();
        assert!(e.0.contains("asset `Z`"), "{}", e.0);
    }
}
