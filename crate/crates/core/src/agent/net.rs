//! The two-branch convolutional actor-critic network.
//!
//! Observation branch: each asset's return row passes through a shared stack
//! of 1-D convolutions (8 filters kernel 8 stride 2, then 16 filters kernel 4
//! stride 2, ReLU). State branch: the portfolio-return vector through its own
//! stack of the same shapes. Flattened features concatenate into one fully
//! connected layer of width 128 feeding a softmax policy head and a scalar
//! value head.
//!
//! Forward and backward passes are written out by hand over a flat parameter
//! vector; the finite-difference tests in this module and the acceptance
//! suite pin the gradients.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{AgentError, Result};

/// One 1-D convolution layer shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    pub fn out_len(&self, in_len: usize) -> usize {
        debug_assert!(in_len >= self.kernel);
        (in_len - self.kernel) / self.stride + 1
    }

    pub fn weight_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel
    }
}

/// Full network shape, derivable from (assets, windows, action count).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetArchitecture {
    pub n_assets: usize,
    pub obs_window: usize,
    pub state_window: usize,
    pub action_count: usize,
    pub fc_width: usize,
    pub obs_convs: Vec<ConvSpec>,
    pub state_convs: Vec<ConvSpec>,
}

impl NetArchitecture {
    /// The reference architecture used by the model pool.
    pub fn reference(n_assets: usize, action_count: usize) -> Self {
        Self {
            n_assets,
            obs_window: 60,
            state_window: 120,
            action_count,
            fc_width: 128,
            obs_convs: vec![
                ConvSpec {
                    out_channels: 8,
                    in_channels: 1,
                    kernel: 8,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: 16,
                    in_channels: 8,
                    kernel: 4,
                    stride: 2,
                },
            ],
            state_convs: vec![
                ConvSpec {
                    out_channels: 8,
                    in_channels: 1,
                    kernel: 8,
                    stride: 2,
                },
                ConvSpec {
                    out_channels: 16,
                    in_channels: 8,
                    kernel: 4,
                    stride: 2,
                },
            ],
        }
    }

    fn branch_out(convs: &[ConvSpec], mut len: usize) -> (usize, usize) {
        let mut channels = 1;
        for c in convs {
            len = c.out_len(len);
            channels = c.out_channels;
        }
        (channels, len)
    }

    /// Flattened feature length per asset after the observation stack.
    pub fn obs_features_per_asset(&self) -> usize {
        let (ch, len) = Self::branch_out(&self.obs_convs, self.obs_window);
        ch * len
    }

    pub fn state_features(&self) -> usize {
        let (ch, len) = Self::branch_out(&self.state_convs, self.state_window);
        ch * len
    }

    pub fn feature_len(&self) -> usize {
        self.n_assets * self.obs_features_per_asset() + self.state_features()
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    pub(crate) fn layout(&self) -> ParamLayout {
        let mut offset = 0usize;
        let mut conv_offsets = |convs: &[ConvSpec]| -> Vec<(usize, usize)> {
            convs
                .iter()
                .map(|c| {
                    let w = offset;
                    offset += c.weight_count();
                    let b = offset;
                    offset += c.out_channels;
                    (w, b)
                })
                .collect()
        };
        let obs_convs = conv_offsets(&self.obs_convs);
        let state_convs = conv_offsets(&self.state_convs);
        let feature_len = self.feature_len();
        let fc_w = offset;
        offset += self.fc_width * feature_len;
        let fc_b = offset;
        offset += self.fc_width;
        let policy_w = offset;
        offset += self.action_count * self.fc_width;
        let policy_b = offset;
        offset += self.action_count;
        let value_w = offset;
        offset += self.fc_width;
        let value_b = offset;
        offset += 1;
        ParamLayout {
            obs_convs,
            state_convs,
            fc_w,
            fc_b,
            policy_w,
            policy_b,
            value_w,
            value_b,
            total: offset,
        }
    }

    /// Canonical text form; the pool artifact stores its SHA-256.
    pub fn canonical_string(&self) -> String {
        let convs = |cs: &[ConvSpec]| {
            cs.iter()
                .map(|c| format!("({},{},{},{})", c.out_channels, c.in_channels, c.kernel, c.stride))
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "net v1 assets={} obs={} state={} actions={} fc={} obs_convs=[{}] state_convs=[{}]",
            self.n_assets,
            self.obs_window,
            self.state_window,
            self.action_count,
            self.fc_width,
            convs(&self.obs_convs),
            convs(&self.state_convs)
        )
    }

    pub fn hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.canonical_string().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_assets == 0 || self.action_count == 0 || self.fc_width == 0 {
            return Err(AgentError::ShapeMismatch(
                "architecture has a zero dimension".into(),
            ));
        }
        let check = |convs: &[ConvSpec], mut len: usize, what: &str| -> Result<()> {
            let mut in_ch = 1usize;
            for (i, c) in convs.iter().enumerate() {
                if c.in_channels != in_ch {
                    return Err(AgentError::ShapeMismatch(format!(
                        "{what} conv {i}: in_channels {} after {} channels",
                        c.in_channels, in_ch
                    )));
                }
                if c.stride == 0 || c.kernel == 0 || len < c.kernel {
                    return Err(AgentError::ShapeMismatch(format!(
                        "{what} conv {i}: kernel {} stride {} on length {len}",
                        c.kernel, c.stride
                    )));
                }
                len = c.out_len(len);
                in_ch = c.out_channels;
            }
            Ok(())
        };
        check(&self.obs_convs, self.obs_window, "obs")?;
        check(&self.state_convs, self.state_window, "state")
    }
}

pub(crate) struct ParamLayout {
    pub obs_convs: Vec<(usize, usize)>,
    pub state_convs: Vec<(usize, usize)>,
    pub fc_w: usize,
    pub fc_b: usize,
    pub policy_w: usize,
    pub policy_b: usize,
    pub value_w: usize,
    pub value_b: usize,
    pub total: usize,
}

/// Flat parameter vector plus its shape table.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValueParams {
    pub arch: NetArchitecture,
    pub values: Vec<f64>,
    pub init_seed: u64,
}

impl PolicyValueParams {
    /// Fan-in-scaled uniform init for the trunk; policy and value heads are
    /// zero-initialized so the starting policy is exactly uniform.
    pub fn init(arch: NetArchitecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut values = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |offset: usize, count: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut values[offset..offset + count] {
                *v = rng.random_range(-bound..bound);
            }
        };
        for (spec, &(w, _b)) in arch.obs_convs.iter().zip(&layout.obs_convs) {
            fill(w, spec.weight_count(), spec.in_channels * spec.kernel, &mut rng);
        }
        for (spec, &(w, _b)) in arch.state_convs.iter().zip(&layout.state_convs) {
            fill(w, spec.weight_count(), spec.in_channels * spec.kernel, &mut rng);
        }
        fill(
            layout.fc_w,
            arch.fc_width * arch.feature_len(),
            arch.feature_len(),
            &mut rng,
        );
        Ok(Self {
            arch,
            values,
            init_seed: seed,
        })
    }
}

struct LayerCache {
    input: Array2<f64>,
    pre: Array2<f64>,
}

pub(crate) struct ForwardCache {
    obs: Vec<Vec<LayerCache>>,
    state: Vec<LayerCache>,
    features: Array1<f64>,
    fc_pre: Array1<f64>,
    fc_act: Array1<f64>,
    pub policy: Array1<f64>,
    pub value: f64,
}

fn conv_forward(input: &Array2<f64>, spec: &ConvSpec, w: &[f64], b: &[f64]) -> Array2<f64> {
    let out_len = spec.out_len(input.ncols());
    let mut out = Array2::<f64>::zeros((spec.out_channels, out_len));
    for o in 0..spec.out_channels {
        for p in 0..out_len {
            let base = p * spec.stride;
            let mut acc = b[o];
            for i in 0..spec.in_channels {
                let w_base = (o * spec.in_channels + i) * spec.kernel;
                for k in 0..spec.kernel {
                    acc += w[w_base + k] * input[[i, base + k]];
                }
            }
            out[[o, p]] = acc;
        }
    }
    out
}

fn relu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|x| x.max(0.0))
}

fn run_branch(
    input: Array2<f64>,
    convs: &[ConvSpec],
    offsets: &[(usize, usize)],
    values: &[f64],
) -> Vec<LayerCache> {
    let mut caches = Vec::with_capacity(convs.len());
    let mut current = input;
    for (spec, &(w_off, b_off)) in convs.iter().zip(offsets) {
        let w = &values[w_off..w_off + spec.weight_count()];
        let b = &values[b_off..b_off + spec.out_channels];
        let pre = conv_forward(&current, spec, w, b);
        let post = relu(&pre);
        caches.push(LayerCache {
            input: current,
            pre,
        });
        current = post;
    }
    // stash the final activation as a pseudo-layer input for flattening
    caches.push(LayerCache {
        input: current,
        pre: Array2::zeros((0, 0)),
    });
    caches
}

fn flatten_into(out: &mut Array1<f64>, offset: usize, a: &Array2<f64>) {
    let mut idx = offset;
    for row in a.outer_iter() {
        for &v in row {
            out[idx] = v;
            idx += 1;
        }
    }
}

pub(crate) fn forward_cached(
    params: &PolicyValueParams,
    obs: &Array2<f64>,
    state: &Array1<f64>,
) -> Result<ForwardCache> {
    let arch = &params.arch;
    if obs.nrows() != arch.n_assets || obs.ncols() != arch.obs_window {
        return Err(AgentError::ShapeMismatch(format!(
            "observation {}x{}, expected {}x{}",
            obs.nrows(),
            obs.ncols(),
            arch.n_assets,
            arch.obs_window
        )));
    }
    if state.len() != arch.state_window {
        return Err(AgentError::ShapeMismatch(format!(
            "state length {}, expected {}",
            state.len(),
            arch.state_window
        )));
    }
    let layout = arch.layout();
    let values = &params.values;
    let obs_feat = arch.obs_features_per_asset();
    let mut features = Array1::<f64>::zeros(arch.feature_len());

    let mut obs_caches = Vec::with_capacity(arch.n_assets);
    for asset in 0..arch.n_assets {
        let row = obs.row(asset);
        let input = Array2::from_shape_fn((1, arch.obs_window), |(_, j)| row[j]);
        let caches = run_branch(input, &arch.obs_convs, &layout.obs_convs, values);
        flatten_into(
            &mut features,
            asset * obs_feat,
            &caches.last().expect("branch output").input,
        );
        obs_caches.push(caches);
    }
    let state_input = Array2::from_shape_fn((1, arch.state_window), |(_, j)| state[j]);
    let state_caches = run_branch(state_input, &arch.state_convs, &layout.state_convs, values);
    flatten_into(
        &mut features,
        arch.n_assets * obs_feat,
        &state_caches.last().expect("branch output").input,
    );

    let feature_len = arch.feature_len();
    let mut fc_pre = Array1::<f64>::zeros(arch.fc_width);
    for h in 0..arch.fc_width {
        let mut acc = values[layout.fc_b + h];
        let base = layout.fc_w + h * feature_len;
        for f in 0..feature_len {
            acc += values[base + f] * features[f];
        }
        fc_pre[h] = acc;
    }
    let fc_act = fc_pre.mapv(|x| x.max(0.0));

    let mut logits = Array1::<f64>::zeros(arch.action_count);
    for a in 0..arch.action_count {
        let mut acc = values[layout.policy_b + a];
        let base = layout.policy_w + a * arch.fc_width;
        for h in 0..arch.fc_width {
            acc += values[base + h] * fc_act[h];
        }
        logits[a] = acc;
    }
    let max_logit = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut policy = logits.mapv(|z| (z - max_logit).exp());
    let norm: f64 = policy.sum();
    policy.mapv_inplace(|p| p / norm);

    let mut value = values[layout.value_b];
    for h in 0..arch.fc_width {
        value += values[layout.value_w + h] * fc_act[h];
    }

    if !value.is_finite() || policy.iter().any(|p| !p.is_finite()) {
        return Err(AgentError::NonFiniteActivation);
    }
    Ok(ForwardCache {
        obs: obs_caches,
        state: state_caches,
        features,
        fc_pre,
        fc_act,
        policy,
        value,
    })
}

/// Deterministic forward pass: softmax policy over the action set and the
/// state-value estimate.
pub fn forward(
    params: &PolicyValueParams,
    obs: &Array2<f64>,
    state: &Array1<f64>,
) -> Result<(Array1<f64>, f64)> {
    let cache = forward_cached(params, obs, state)?;
    Ok((cache.policy, cache.value))
}

fn conv_backward(
    cache: &LayerCache,
    spec: &ConvSpec,
    w: &[f64],
    d_post: &Array2<f64>,
    grad: &mut [f64],
    w_off: usize,
    b_off: usize,
) -> Array2<f64> {
    let out_len = d_post.ncols();
    let mut d_input = Array2::<f64>::zeros(cache.input.dim());
    for o in 0..spec.out_channels {
        for p in 0..out_len {
            // ReLU gate on the preactivation
            if cache.pre[[o, p]] <= 0.0 {
                continue;
            }
            let g = d_post[[o, p]];
            if g == 0.0 {
                continue;
            }
            let base = p * spec.stride;
            grad[b_off + o] += g;
            for i in 0..spec.in_channels {
                let w_base = (o * spec.in_channels + i) * spec.kernel;
                for k in 0..spec.kernel {
                    grad[w_off + w_base + k] += g * cache.input[[i, base + k]];
                    d_input[[i, base + k]] += g * w[w_base + k];
                }
            }
        }
    }
    d_input
}

fn branch_backward(
    caches: &[LayerCache],
    convs: &[ConvSpec],
    offsets: &[(usize, usize)],
    values: &[f64],
    d_flat: &[f64],
    grad: &mut [f64],
) {
    let out_shape = caches.last().expect("branch output").input.dim();
    let mut d_current = Array2::<f64>::zeros(out_shape);
    let mut idx = 0;
    for mut row in d_current.outer_iter_mut() {
        for v in row.iter_mut() {
            *v = d_flat[idx];
            idx += 1;
        }
    }
    for layer in (0..convs.len()).rev() {
        let spec = &convs[layer];
        let (w_off, b_off) = offsets[layer];
        let w = &values[w_off..w_off + spec.weight_count()];
        d_current = conv_backward(&caches[layer], spec, w, &d_current, grad, w_off, b_off);
    }
}

/// Accumulates `d loss / d params` into `grad` for one forward pass, given
/// the gradients at the policy logits and the value output.
pub(crate) fn backward(
    params: &PolicyValueParams,
    cache: &ForwardCache,
    d_logits: &Array1<f64>,
    d_value: f64,
    grad: &mut [f64],
) {
    let arch = &params.arch;
    let layout = arch.layout();
    let values = &params.values;
    let fc_width = arch.fc_width;
    let feature_len = arch.feature_len();

    // heads
    let mut d_fc_act = vec![0.0; fc_width];
    for a in 0..arch.action_count {
        let g = d_logits[a];
        if g != 0.0 {
            let base = layout.policy_w + a * fc_width;
            for h in 0..fc_width {
                grad[base + h] += g * cache.fc_act[h];
                d_fc_act[h] += g * values[base + h];
            }
            grad[layout.policy_b + a] += g;
        }
    }
    if d_value != 0.0 {
        for h in 0..fc_width {
            grad[layout.value_w + h] += d_value * cache.fc_act[h];
            d_fc_act[h] += d_value * values[layout.value_w + h];
        }
        grad[layout.value_b] += d_value;
    }

    // fully connected trunk
    let mut d_features = vec![0.0; feature_len];
    for h in 0..fc_width {
        if cache.fc_pre[h] <= 0.0 {
            continue;
        }
        let g = d_fc_act[h];
        if g == 0.0 {
            continue;
        }
        let base = layout.fc_w + h * feature_len;
        for f in 0..feature_len {
            grad[base + f] += g * cache.features[f];
            d_features[f] += g * values[base + f];
        }
        grad[layout.fc_b + h] += g;
    }

    // branches
    let obs_feat = arch.obs_features_per_asset();
    for (asset, caches) in cache.obs.iter().enumerate() {
        let seg = &d_features[asset * obs_feat..(asset + 1) * obs_feat];
        branch_backward(caches, &arch.obs_convs, &layout.obs_convs, values, seg, grad);
    }
    let seg = &d_features[arch.n_assets * obs_feat..];
    branch_backward(
        &cache.state,
        &arch.state_convs,
        &layout.state_convs,
        values,
        seg,
        grad,
    );
}
