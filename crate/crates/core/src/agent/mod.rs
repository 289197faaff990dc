//! The allocation agent: advantage actor-critic training over simulated
//! markets, the per-regime model pools, and pool inference.
//!
//! Training runs `W` workers over independently seeded environments. In
//! synchronous mode all workers collect rollouts against the same parameter
//! snapshot and the updates apply in worker order, so a (seed, config,
//! dataset) triple fixes the final parameter vector byte for byte. The
//! asynchronous mode runs free-threaded workers against a shared store with
//! last-writer-wins updates and makes no reproducibility promise.

mod net;
mod pool_io;

pub use net::{forward, ConvSpec, NetArchitecture, PolicyValueParams};

use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::action_space::ActionSet;
use crate::market_data::{CorrelationMatrix, ReturnPanel};
use crate::portfolio_env::{EnvConfig, EnvError, PortfolioEnv, StepOutput};
use crate::rcme::{RcmeError, RepresentativeSet};
use crate::simulator::{SimConfig, SimulatedPanel, SimulatorError};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation")]
    NonFiniteActivation,
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("training diverged: non-finite loss or parameters")]
    DivergedTraining,
    #[error("empty trajectory")]
    EmptyTrajectory,
    #[error("no training panels supplied")]
    EmptyDataset,
    #[error("representative {0} ended with zero trained models")]
    EmptySubPool(usize),
    #[error("no sub-pool for representative {0}")]
    MissingSubPool(usize),
    #[error("artifact format error: {0}")]
    ArtifactFormat(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Rcme(#[from] RcmeError),
    #[error(transparent)]
    Simulator(#[from] SimulatorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AgentError>;

/// One environment step as seen by the learner.
#[derive(Debug, Clone)]
pub struct Transition {
    pub observation: Array2<f64>,
    pub state: Array1<f64>,
    pub action: usize,
    pub reward: f64,
    pub done: bool,
}

/// A rollout plus the observation to bootstrap from when it did not end the
/// episode.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub steps: Vec<Transition>,
    pub bootstrap: Option<(Array2<f64>, Array1<f64>)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Synchronous,
    Asynchronous,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub rollout_len: usize,
    pub workers: usize,
    pub total_env_steps: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Default for TrainConfig {
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
            mode: TrainMode::Synchronous,
        }
    }
}

/// n-step bootstrapped returns and advantages at the current parameters.
/// The bootstrap value and the advantages are training targets: gradients
/// never flow through them.
pub fn advantage_targets(
    params: &PolicyValueParams,
    trajectory: &Trajectory,
    cfg: &TrainConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let steps = &trajectory.steps;
    if steps.is_empty() {
        return Err(AgentError::EmptyTrajectory);
    }
    let mut bootstrap = 0.0;
    if !steps.last().expect("non-empty").done {
        let (obs, state) = trajectory
            .bootstrap
            .as_ref()
            .ok_or_else(|| AgentError::ShapeMismatch("missing bootstrap observation".into()))?;
        bootstrap = net::forward(params, obs, state)?.1;
    }
    let mut returns = vec![0.0; steps.len()];
    let mut acc = bootstrap;
    for (i, tr) in steps.iter().enumerate().rev() {
        if tr.done {
            acc = 0.0;
        }
        acc = tr.reward + cfg.gamma * acc;
        returns[i] = acc;
    }
    let mut advantages = Vec::with_capacity(steps.len());
    for (tr, &ret) in steps.iter().zip(&returns) {
        let (_, value) = net::forward(params, &tr.observation, &tr.state)?;
        advantages.push(ret - value);
    }
    Ok((returns, advantages))
}

/// The per-rollout surrogate whose gradient is the actor-critic update:
/// `mean_t [-log pi(a_t) A_t + c_v (R_t - V_t)^2 - c_e H_t]` with the
/// returns and advantages held fixed. Exposed so gradient checks can
/// finite-difference exactly the function the analytic gradient
/// differentiates.
pub fn frozen_surrogate_loss(
    params: &PolicyValueParams,
    trajectory: &Trajectory,
    cfg: &TrainConfig,
    returns: &[f64],
    advantages: &[f64],
) -> Result<f64> {
    let steps = &trajectory.steps;
    if steps.len() != returns.len() || steps.len() != advantages.len() {
        return Err(AgentError::ShapeMismatch(
            "targets do not match trajectory length".into(),
        ));
    }
    let n = steps.len() as f64;
    let mut loss = 0.0;
    for ((tr, &ret), &adv) in steps.iter().zip(returns).zip(advantages) {
        let (policy, value) = net::forward(params, &tr.observation, &tr.state)?;
        let log_p = policy[tr.action].max(f64::MIN_POSITIVE).ln();
        let entropy: f64 = -policy
            .iter()
            .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
            .sum::<f64>();
        let residual = ret - value;
        loss += -log_p * adv + cfg.value_coef * residual * residual - cfg.entropy_coef * entropy;
    }
    Ok(loss / n)
}

/// Advantage actor-critic loss and its analytic gradient over one rollout.
///
/// Returns bootstrap from the value of the trajectory's final observation
/// when the episode did not end. The loss per step is
/// `-log pi(a) * A + c_v (R - V)^2 - c_e H`, averaged over the rollout, with
/// the advantage `A = R - V` treated as a constant.
pub fn loss_and_gradients(
    params: &PolicyValueParams,
    trajectory: &Trajectory,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let (returns, advantages) = advantage_targets(params, trajectory, cfg)?;
    let steps = &trajectory.steps;
    let n = steps.len() as f64;
    let mut grad = vec![0.0; params.values.len()];
    let mut loss = 0.0;
    for ((tr, &ret), &advantage) in steps.iter().zip(&returns).zip(&advantages) {
        let cache = net::forward_cached(params, &tr.observation, &tr.state)?;
        let policy = &cache.policy;
        let value = cache.value;
        let residual = ret - value;
        let log_p = policy[tr.action].max(f64::MIN_POSITIVE).ln();
        let entropy: f64 = -policy
            .iter()
            .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
            .sum::<f64>();
        loss += -log_p * advantage + cfg.value_coef * residual * residual
            - cfg.entropy_coef * entropy;

        let mut d_logits = Array1::<f64>::zeros(params.arch.action_count);
        for a in 0..params.arch.action_count {
            let one_hot = if a == tr.action { 1.0 } else { 0.0 };
            let policy_term = advantage * (policy[a] - one_hot);
            let entropy_term = if policy[a] > 0.0 {
                cfg.entropy_coef * policy[a] * (policy[a].ln() + entropy)
            } else {
                0.0
            };
            d_logits[a] = (policy_term + entropy_term) / n;
        }
        let d_value = -2.0 * cfg.value_coef * residual / n;
        net::backward(params, &cache, &d_logits, d_value, &mut grad);
    }
    loss /= n;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(AgentError::NonFiniteLoss);
    }
    Ok((loss, grad))
}

/// Adam with bias correction, beta = (0.9, 0.999), eps = 1e-8.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / b1t;
            let v_hat = self.v[i] / b2t;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Scales the gradient down to `max_norm` when its global norm exceeds it.
pub fn clip_gradient(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= scale;
        }
    }
}

/// Seeded environment source over a panel dataset. Worker `w`'s episode `e`
/// runs on panel `(w + e * workers) % panels`, so workers cycle disjoint
/// slices when the dataset splits evenly.
#[derive(Debug, Clone)]
pub struct EnvFactory {
    panels: Vec<Array2<f64>>,
    action_set: Arc<ActionSet>,
    env_cfg: EnvConfig,
    workers: usize,
}

impl EnvFactory {
    pub fn from_simulated(
        panels: &[SimulatedPanel],
        action_set: Arc<ActionSet>,
        env_cfg: EnvConfig,
        workers: usize,
    ) -> Result<Self> {
        let returns: Vec<Array2<f64>> = panels.iter().map(|p| p.returns()).collect();
        Self::from_returns(returns, action_set, env_cfg, workers)
    }

    pub fn from_returns(
        panels: Vec<Array2<f64>>,
        action_set: Arc<ActionSet>,
        env_cfg: EnvConfig,
        workers: usize,
    ) -> Result<Self> {
        if panels.is_empty() {
            return Err(AgentError::EmptyDataset);
        }
        for (i, p) in panels.iter().enumerate() {
            if p.nrows() <= env_cfg.obs_window {
                return Err(AgentError::ShapeMismatch(format!(
                    "panel {i} has {} return rows, need more than {}",
                    p.nrows(),
                    env_cfg.obs_window
                )));
            }
            if p.ncols() != action_set.n_assets {
                return Err(AgentError::ShapeMismatch(format!(
                    "panel {i} has {} assets, action set expects {}",
                    p.ncols(),
                    action_set.n_assets
                )));
            }
        }
        Ok(Self {
            panels,
            action_set,
            env_cfg,
            workers: workers.max(1),
        })
    }

    pub fn n_panels(&self) -> usize {
        self.panels.len()
    }

    pub fn n_assets(&self) -> usize {
        self.action_set.n_assets
    }

    pub fn action_set(&self) -> &Arc<ActionSet> {
        &self.action_set
    }

    pub fn env_config(&self) -> &EnvConfig {
        &self.env_cfg
    }

    pub fn start_index(&self) -> usize {
        self.env_cfg.obs_window - 1
    }

    pub fn make_env(&self, worker: usize, episode: usize) -> PortfolioEnv {
        let idx = (worker + episode * self.workers) % self.panels.len();
        PortfolioEnv::new(
            self.panels[idx].clone(),
            Arc::clone(&self.action_set),
            self.env_cfg.clone(),
        )
    }
}

fn sample_action(policy: &Array1<f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in policy.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    policy.len() - 1
}

fn argmax(policy: &Array1<f64>) -> usize {
    let mut best = 0;
    for (i, &p) in policy.iter().enumerate() {
        if p > policy[best] {
            best = i;
        }
    }
    best
}

struct Worker {
    index: usize,
    env: PortfolioEnv,
    pending: StepOutput,
    episode: usize,
    rng: ChaCha8Rng,
}

impl Worker {
    fn new(factory: &EnvFactory, index: usize, seed: u64) -> Result<Self> {
        let mut env = factory.make_env(index, 0);
        let pending = env.reset(factory.start_index())?;
        Ok(Self {
            index,
            env,
            pending,
            episode: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ (0x9e3779b97f4a7c15u64.wrapping_mul(index as u64 + 1))),
        })
    }

    /// Collects up to `len` steps, cutting at episode end (the next episode's
    /// environment is prepared immediately).
    fn collect(
        &mut self,
        factory: &EnvFactory,
        params: &PolicyValueParams,
        len: usize,
    ) -> Result<Trajectory> {
        let mut steps = Vec::with_capacity(len);
        let mut ended = false;
        for _ in 0..len {
            let (policy, _) =
                net::forward(params, &self.pending.observation.values, &self.pending.state)?;
            let action = sample_action(&policy, &mut self.rng);
            let out = self.env.step(action)?;
            steps.push(Transition {
                observation: std::mem::replace(
                    &mut self.pending.observation.values,
                    Array2::zeros((0, 0)),
                ),
                state: std::mem::replace(&mut self.pending.state, Array1::zeros(0)),
                action,
                reward: out.reward,
                done: out.done,
            });
            ended = out.done;
            self.pending = out;
            if ended {
                self.episode += 1;
                self.env = factory.make_env(self.index, self.episode);
                self.pending = self.env.reset(factory.start_index())?;
                break;
            }
        }
        let bootstrap = if ended {
            None
        } else {
            Some((
                self.pending.observation.values.clone(),
                self.pending.state.clone(),
            ))
        };
        Ok(Trajectory { steps, bootstrap })
    }
}

/// One row of the training-curve log (per synchronous update round).
#[derive(Debug, Clone, Copy)]
pub struct TrainLogPoint {
    pub round: usize,
    pub env_steps: usize,
    pub mean_loss: f64,
    pub mean_reward: f64,
}

/// Trains one model on the factory's dataset. Zero `total_env_steps` returns
/// the freshly initialized parameters.
pub fn train(
    factory: &EnvFactory,
    arch: NetArchitecture,
    cfg: &TrainConfig,
) -> Result<PolicyValueParams> {
    train_with_log(factory, arch, cfg).map(|(params, _)| params)
}

/// [`train`] plus the per-round training curve. The asynchronous mode does
/// not produce a curve (update order is nondeterministic).
pub fn train_with_log(
    factory: &EnvFactory,
    arch: NetArchitecture,
    cfg: &TrainConfig,
) -> Result<(PolicyValueParams, Vec<TrainLogPoint>)> {
    if arch.n_assets != factory.n_assets() || arch.action_count != factory.action_set().len() {
        return Err(AgentError::ShapeMismatch(format!(
            "architecture ({} assets, {} actions) vs factory ({}, {})",
            arch.n_assets,
            arch.action_count,
            factory.n_assets(),
            factory.action_set().len()
        )));
    }
    match cfg.mode {
        TrainMode::Synchronous => train_sync(factory, arch, cfg),
        TrainMode::Asynchronous => train_async(factory, arch, cfg).map(|p| (p, Vec::new())),
    }
}

fn train_sync(
    factory: &EnvFactory,
    arch: NetArchitecture,
    cfg: &TrainConfig,
) -> Result<(PolicyValueParams, Vec<TrainLogPoint>)> {
    let mut params = PolicyValueParams::init(arch, cfg.seed)?;
    let mut adam = AdamState::new(params.values.len());
    let mut workers: Vec<Worker> = (0..cfg.workers.max(1))
        .map(|w| Worker::new(factory, w, cfg.seed))
        .collect::<Result<_>>()?;
    let mut steps_done = 0usize;
    let mut log = Vec::new();
    let mut round = 0usize;
    while steps_done < cfg.total_env_steps {
        let snapshot = params.clone();
        let mut grads = Vec::with_capacity(workers.len());
        let mut round_loss = 0.0;
        let mut round_reward = 0.0;
        let mut round_steps = 0usize;
        for worker in &mut workers {
            if steps_done >= cfg.total_env_steps {
                break;
            }
            let trajectory = worker.collect(factory, &snapshot, cfg.rollout_len)?;
            steps_done += trajectory.steps.len();
            round_steps += trajectory.steps.len();
            round_reward += trajectory.steps.iter().map(|t| t.reward).sum::<f64>();
            let (loss, grad) = loss_and_gradients(&snapshot, &trajectory, cfg)?;
            if !loss.is_finite() {
                return Err(AgentError::DivergedTraining);
            }
            round_loss += loss;
            grads.push(grad);
        }
        let n_grads = grads.len().max(1);
        for mut grad in grads {
            clip_gradient(&mut grad, cfg.grad_clip);
            adam.apply(&mut params.values, &grad, cfg.learning_rate);
        }
        if params.values.iter().any(|v| !v.is_finite()) {
            return Err(AgentError::DivergedTraining);
        }
        log.push(TrainLogPoint {
            round,
            env_steps: steps_done,
            mean_loss: round_loss / n_grads as f64,
            mean_reward: round_reward / round_steps.max(1) as f64,
        });
        round += 1;
    }
    Ok((params, log))
}

fn train_async(
    factory: &EnvFactory,
    arch: NetArchitecture,
    cfg: &TrainConfig,
) -> Result<PolicyValueParams> {
    let init = PolicyValueParams::init(arch.clone(), cfg.seed)?;
    let len = init.values.len();
    let shared = Arc::new(RwLock::new((init.values.clone(), AdamState::new(len))));
    let steps_done = Arc::new(AtomicU64::new(0));
    let failed = Arc::new(AtomicBool::new(false));
    let first_error: Arc<Mutex<Option<AgentError>>> = Arc::new(Mutex::new(None));

    std::thread::scope(|scope| {
        for w in 0..cfg.workers.max(1) {
            let shared = Arc::clone(&shared);
            let steps_done = Arc::clone(&steps_done);
            let failed = Arc::clone(&failed);
            let first_error = Arc::clone(&first_error);
            let arch = arch.clone();
            scope.spawn(move || {
                let run = || -> Result<()> {
                    let mut worker = Worker::new(factory, w, cfg.seed)?;
                    while !failed.load(Ordering::Relaxed)
                        && (steps_done.load(Ordering::Relaxed) as usize) < cfg.total_env_steps
                    {
                        let snapshot = PolicyValueParams {
                            arch: arch.clone(),
                            values: shared.read().expect("store lock").0.clone(),
                            init_seed: cfg.seed,
                        };
                        let trajectory = worker.collect(factory, &snapshot, cfg.rollout_len)?;
                        let n = trajectory.steps.len() as u64;
                        let (loss, mut grad) = loss_and_gradients(&snapshot, &trajectory, cfg)?;
                        if !loss.is_finite() {
                            return Err(AgentError::DivergedTraining);
                        }
                        clip_gradient(&mut grad, cfg.grad_clip);
                        {
                            // last-writer-wins application against the live store
                            let mut store = shared.write().expect("store lock");
                            let (values, adam) = &mut *store;
                            adam.apply(values, &grad, cfg.learning_rate);
                        }
                        steps_done.fetch_add(n, Ordering::Relaxed);
                    }
                    Ok(())
                };
                if let Err(e) = run() {
                    failed.store(true, Ordering::Relaxed);
                    first_error.lock().expect("error lock").get_or_insert(e);
                }
            });
        }
    });

    if let Some(e) = first_error.lock().expect("error lock").take() {
        return Err(e);
    }
    let values = shared.read().expect("store lock").0.clone();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(AgentError::DivergedTraining);
    }
    Ok(PolicyValueParams {
        arch,
        values,
        init_seed: cfg.seed,
    })
}

/// Training metadata kept alongside each pool member.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMeta {
    pub rep_index: usize,
    pub model_index: usize,
    pub seed: u64,
    /// Sharpe of one deterministic evaluation episode on the model's own
    /// training subset.
    pub final_sharpe: f64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: PolicyValueParams,
    pub meta: ModelMeta,
    /// Training curve (empty for async-trained or loaded models).
    pub log: Vec<TrainLogPoint>,
}

#[derive(Debug, Clone)]
pub struct SubPool {
    pub rep_index: usize,
    pub models: Vec<TrainedModel>,
}

/// All sub-pools, one per representative correlation matrix.
#[derive(Debug, Clone)]
pub struct ModelPool {
    pub arch: NetArchitecture,
    pub sub_pools: Vec<SubPool>,
    /// Human-readable notes for per-model failures that were skipped.
    pub failures: Vec<String>,
}

impl ModelPool {
    pub fn sub_pool(&self, rep_index: usize) -> Result<&SubPool> {
        self.sub_pools
            .iter()
            .find(|s| s.rep_index == rep_index)
            .ok_or(AgentError::MissingSubPool(rep_index))
    }

    pub fn model_count(&self) -> usize {
        self.sub_pools.iter().map(|s| s.models.len()).sum()
    }
}

/// Pool construction settings.
#[derive(Debug, Clone)]
pub struct PoolBuildConfig {
    /// Models per representative (M).
    pub models_per_rep: usize,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub env: EnvConfig,
}

/// Deterministic evaluation episode; returns the episode returns.
pub fn evaluation_episode(env: &mut PortfolioEnv, params: &PolicyValueParams) -> Result<Vec<f64>> {
    let mut out = env.reset(params.arch.obs_window - 1)?;
    while !out.done {
        let (policy, _) = net::forward(params, &out.observation.values, &out.state)?;
        out = env.step(argmax(&policy))?;
    }
    Ok(env.episode_returns().to_vec())
}

/// Builds the total model pool: per representative, simulate a dataset,
/// train M models on disjoint path subsets with distinct seeds, and collect
/// them into sub-pools. Per-model failures are recorded and skipped; a
/// representative that ends with zero models fails the build.
pub fn build_model_pool(
    rs: &RepresentativeSet,
    rp: &ReturnPanel,
    action_set: Arc<ActionSet>,
    cfg: &PoolBuildConfig,
) -> Result<ModelPool> {
    let arch = NetArchitecture::reference(rs.dim(), action_set.len());
    let m_models = cfg.models_per_rep.max(1);
    let mut sub_pools = Vec::with_capacity(rs.k());
    let mut failures = Vec::new();
    for rep in 0..rs.k() {
        let mut models = Vec::with_capacity(m_models);
        // one seed block per representative so datasets never overlap
        let sim = SimConfig {
            base_seed: cfg
                .sim
                .base_seed
                .wrapping_add((rep * cfg.sim.n_paths) as u64),
            ..cfg.sim.clone()
        };
        match crate::simulator::generate_dataset(rep, rs, rp, &sim) {
            Ok(dataset) => {
                for m in 0..m_models {
                    let subset: Vec<SimulatedPanel> = dataset
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| i % m_models == m)
                        .map(|(_, p)| p.clone())
                        .collect();
                    if subset.is_empty() {
                        failures.push(format!(
                            "rep {rep} model {m}: no paths in subset (n_paths {} < M {})",
                            sim.n_paths, m_models
                        ));
                        continue;
                    }
                    let seed = cfg
                        .train
                        .seed
                        .wrapping_add(((rep * m_models + m) as u64).wrapping_mul(7919));
                    let tcfg = TrainConfig {
                        seed,
                        ..cfg.train.clone()
                    };
                    let build = || -> Result<TrainedModel> {
                        let factory = EnvFactory::from_simulated(
                            &subset,
                            Arc::clone(&action_set),
                            cfg.env.clone(),
                            tcfg.workers,
                        )?;
                        let (params, log) = train_with_log(&factory, arch.clone(), &tcfg)?;
                        let mut eval_env = factory.make_env(0, 0);
                        let prs = evaluation_episode(&mut eval_env, &params)?;
                        let final_sharpe =
                            crate::portfolio_env::trailing_sharpe(&prs).unwrap_or(0.0);
                        Ok(TrainedModel {
                            params,
                            meta: ModelMeta {
                                rep_index: rep,
                                model_index: m,
                                seed,
                                final_sharpe,
                            },
                            log,
                        })
                    };
                    match build() {
                        Ok(model) => models.push(model),
                        Err(e) => failures.push(format!("rep {rep} model {m}: {e}")),
                    }
                }
            }
            Err(e) => failures.push(format!("rep {rep}: dataset generation failed: {e}")),
        }
        if models.is_empty() {
            return Err(AgentError::EmptySubPool(rep));
        }
        sub_pools.push(SubPool {
            rep_index: rep,
            models,
        });
    }
    Ok(ModelPool {
        arch,
        sub_pools,
        failures,
    })
}

#[derive(Debug, Clone, Copy)]
pub enum InferMode {
    /// Argmax of the averaged policy, ties to the lowest index.
    Deterministic,
    /// Sample from the averaged policy with the given seed.
    Stochastic { seed: u64 },
}

/// Averaged policy of a sub-pool's members on one observation.
pub fn ensemble_policy(
    sub_pool: &SubPool,
    obs: &Array2<f64>,
    state: &Array1<f64>,
) -> Result<Array1<f64>> {
    let mut acc: Option<Array1<f64>> = None;
    for model in &sub_pool.models {
        let (policy, _) = net::forward(&model.params, obs, state)?;
        acc = Some(match acc {
            Some(a) => a + &policy,
            None => policy,
        });
    }
    let mut avg = acc.ok_or(AgentError::EmptySubPool(sub_pool.rep_index))?;
    avg.mapv_inplace(|p| p / sub_pool.models.len() as f64);
    Ok(avg)
}

/// Pool inference: resolve the regime of the current correlation matrix,
/// average the sub-pool's policies, and pick an action.
pub fn infer(
    pool: &ModelPool,
    rs: &RepresentativeSet,
    current_corr: &CorrelationMatrix,
    obs: &Array2<f64>,
    state: &Array1<f64>,
    mode: InferMode,
) -> Result<usize> {
    let rep = crate::rcme::nearest_representative(current_corr, rs)?;
    let sub = pool.sub_pool(rep)?;
    let policy = ensemble_policy(sub, obs, state)?;
    Ok(match mode {
        InferMode::Deterministic => argmax(&policy),
        InferMode::Stochastic { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_action(&policy, &mut rng)
        }
    })
}
