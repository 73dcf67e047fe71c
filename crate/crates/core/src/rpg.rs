//! Short-horizon rollouts on the tape, the truncated surrogate return, the
//! total policy loss and the actor step.
//!
//! A rollout keeps the whole chain `noise -> flow -> tanh -> dynamics ->
//! reward` on one tape, so a single backward pass yields the
//! reparameterized policy gradient through both the flow and the physics.

use rand::Rng;
use thiserror::Error;

use crate::critic::CriticPair;
use crate::env::{BatchedEnv, EnvError, ObsNormalizer};
use crate::flow::{self, FlowError, FlowPolicy};
use crate::net::{clip_global_norm, mlp_forward, AdamW, MlpParams, MlpVars, NetError};
use crate::rng;
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::{self, Tensor};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 1.0;

#[derive(Debug, Error)]
pub enum RpgError {
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("noise block has {got} draws, rollout needs {expected}")]
    NoiseBlock { expected: usize, got: usize },
    #[error("non-finite gradient in {block} at iteration {iteration}")]
    NonFiniteGrad { iteration: u64, block: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Gaussian policy head: `tanh(mu(s) + exp(log_std(s)) * eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPolicy {
    pub net: MlpParams,
    obs_dim: usize,
    act_dim: usize,
}

impl GaussianPolicy {
    pub fn new(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut impl Rng) -> Result<Self, NetError> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * act_dim);
        Ok(Self {
            net: MlpParams::new(&sizes, rng)?,
            obs_dim,
            act_dim,
        })
    }

    pub fn from_net(net: MlpParams, obs_dim: usize, act_dim: usize) -> Self {
        Self { net, obs_dim, act_dim }
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }
}

/// The actor being trained.
#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Flow(FlowPolicy),
    Gaussian(GaussianPolicy),
}

/// Pre-squash and squashed samples on the tape.
#[derive(Clone, Copy, Debug)]
pub struct PolicySample {
    pub pre: Var,
    pub action: Var,
}

impl Policy {
    pub fn net(&self) -> &MlpParams {
        match self {
            Policy::Flow(p) => &p.net,
            Policy::Gaussian(p) => &p.net,
        }
    }

    pub fn net_mut(&mut self) -> &mut MlpParams {
        match self {
            Policy::Flow(p) => &mut p.net,
            Policy::Gaussian(p) => &mut p.net,
        }
    }

    pub fn act_dim(&self) -> usize {
        match self {
            Policy::Flow(p) => p.act_dim(),
            Policy::Gaussian(p) => p.act_dim,
        }
    }

    pub fn chunk(&self) -> usize {
        match self {
            Policy::Flow(p) => p.cfg.chunk,
            Policy::Gaussian(_) => 1,
        }
    }

    /// Columns of one noise draw (and of one sample).
    pub fn width(&self) -> usize {
        self.act_dim() * self.chunk()
    }

    pub fn flow(&self) -> Option<&FlowPolicy> {
        match self {
            Policy::Flow(p) => Some(p),
            Policy::Gaussian(_) => None,
        }
    }

    /// Draws a sample for normalized observations `obs` on the tape.
    pub fn sample(&self, tape: &Tape, vars: &MlpVars, obs: Var, noise: Var) -> Result<PolicySample, RpgError> {
        match self {
            Policy::Flow(p) => {
                let s = flow::sample_chunk(tape, vars, p, obs, noise)?;
                Ok(PolicySample {
                    pre: s.pre,
                    action: s.action,
                })
            }
            Policy::Gaussian(p) => {
                let d = p.act_dim;
                let out = mlp_forward(tape, vars, obs)?;
                let mu = tape.slice_cols(out, 0, d)?;
                let log_std = tape.clamp(tape.slice_cols(out, d, 2 * d)?, LOG_STD_MIN, LOG_STD_MAX)?;
                let pre = tape.add(mu, tape.mul(tape.exp(log_std)?, noise)?)?;
                Ok(PolicySample {
                    pre,
                    action: tape.tanh(pre)?,
                })
            }
        }
    }

    /// Tape-free twin of [`Self::sample`]; returns `(pre, action)`.
    pub fn sample_values(&self, obs: &Tensor, noise: &Tensor) -> Result<(Tensor, Tensor), RpgError> {
        match self {
            Policy::Flow(p) => Ok(flow::sample_action_values(&p.net, &p.cfg, obs, noise)?),
            Policy::Gaussian(p) => {
                let d = p.act_dim;
                let out = p.net.forward(obs)?;
                let mu = tensor::slice_cols(&out, 0, d);
                let std = tensor::slice_cols(&out, d, 2 * d).map(|v| v.clamp(LOG_STD_MIN, LOG_STD_MAX).exp());
                let scaled = std.zip_map(noise, |s, e| s * e);
                let pre = mu.zip_map(&scaled, |m, x| m + x);
                let action = pre.map(f64::tanh);
                Ok((pre, action))
            }
        }
    }
}

/// Gaussian noise for one segment: one `n x width` draw per chunk boundary.
pub fn draw_noise(rng: &mut impl Rng, n: usize, width: usize, horizon: usize, chunk: usize) -> Vec<Tensor> {
    (0..horizon.div_ceil(chunk))
        .map(|_| rng::gaussian(rng, n, width))
        .collect()
}

/// An `H`-step batched rollout on a live tape.
#[derive(Clone, Debug)]
pub struct Segment {
    /// Raw observations `s_0 .. s_{H-1}` (`N x obs` each).
    pub obs: Vec<Var>,
    pub obs_values: Vec<Tensor>,
    /// Executed actions `a_0 .. a_{H-1}`.
    pub actions: Vec<Var>,
    /// Rewards `r_0 .. r_{H-1}` (`N x 1` each).
    pub rewards: Vec<Var>,
    pub reward_values: Tensor,
    /// `done[t][i]`: instance `i` finished its episode at step `t`.
    pub done: Vec<Vec<bool>>,
    /// Raw observation `s_H` the next segment starts from.
    pub terminal_obs: Var,
    pub terminal_obs_values: Tensor,
    /// Raw observations at chunk boundaries and the pre-tanh samples drawn there.
    pub sample_obs: Vec<Tensor>,
    pub sample_pre: Vec<Tensor>,
}

impl Segment {
    pub fn horizon(&self) -> usize {
        self.rewards.len()
    }

    /// Mean over instances of the undiscounted reward sum.
    pub fn mean_return(&self) -> f64 {
        self.reward_values.sum() / self.reward_values.cols().max(1) as f64
    }

    /// Visited observations stacked `(H * N) x obs`.
    pub fn stacked_obs(&self) -> Tensor {
        let refs: Vec<&Tensor> = self.obs_values.iter().collect();
        Tensor::vstack(&refs)
    }

    /// `V(s_{t+1})` inputs stacked `(H * N) x obs`: `s_1 .. s_{H-1}, s_H`.
    pub fn stacked_next_obs(&self) -> Tensor {
        let mut refs: Vec<&Tensor> = self.obs_values.iter().skip(1).collect();
        refs.push(&self.terminal_obs_values);
        Tensor::vstack(&refs)
    }

    /// `(observation, pre-tanh sample)` rows for the recent-action buffer.
    pub fn sample_pairs(&self) -> (Tensor, Tensor) {
        let o: Vec<&Tensor> = self.sample_obs.iter().collect();
        let p: Vec<&Tensor> = self.sample_pre.iter().collect();
        (Tensor::vstack(&o), Tensor::vstack(&p))
    }
}

/// Rolls `env` forward `horizon` steps with the policy on `tape`.
///
/// `noise[j]` feeds the sample drawn at step `j * C`. With `chunk_executor`
/// set, a single-action policy still goes through the chunk slicing path.
#[allow(clippy::too_many_arguments)]
pub fn rollout_segment(
    tape: &Tape,
    policy: &Policy,
    vars: &MlpVars,
    env: &mut BatchedEnv,
    norm: &ObsNormalizer,
    horizon: usize,
    noise: &[Tensor],
    chunk_executor: bool,
) -> Result<Segment, RpgError> {
    if horizon == 0 {
        return Err(RpgError::EmptyHorizon);
    }
    let c = policy.chunk();
    let d = policy.act_dim();
    if noise.len() < horizon.div_ceil(c) {
        return Err(RpgError::NoiseBlock {
            expected: horizon.div_ceil(c),
            got: noise.len(),
        });
    }
    let kind = env.kind();
    let n = env.len();
    let mut state = tape.constant(env.states().clone());
    let mut seg = Segment {
        obs: Vec::with_capacity(horizon),
        obs_values: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        rewards: Vec::with_capacity(horizon),
        reward_values: Tensor::zeros(horizon, n),
        done: Vec::with_capacity(horizon),
        terminal_obs: state,
        terminal_obs_values: Tensor::zeros(0, 0),
        sample_obs: Vec::new(),
        sample_pre: Vec::new(),
    };
    let mut current: Option<PolicySample> = None;
    for t in 0..horizon {
        let obs = kind.observe(tape, state)?;
        let obs_v = tape.value(obs)?;
        if t % c == 0 {
            let obs_n = norm.normalize(tape, obs)?;
            let sample = policy.sample(tape, vars, obs_n, tape.constant(noise[t / c].clone()))?;
            seg.sample_obs.push(obs_v.clone());
            seg.sample_pre.push(tape.value(sample.pre)?);
            current = Some(sample);
        }
        let sample = current.expect("sample drawn at step 0");
        let action = if c == 1 && !chunk_executor {
            sample.action
        } else {
            let j = t % c;
            tape.slice_cols(sample.action, j * d, (j + 1) * d)?
        };
        let tr = env.step(tape, state, action)?;
        let r = tape.value(tr.reward)?;
        for i in 0..n {
            seg.reward_values.set(t, i, r.get(i, 0));
        }
        seg.obs.push(obs);
        seg.obs_values.push(obs_v);
        seg.actions.push(action);
        seg.rewards.push(tr.reward);
        seg.done.push(tr.done);
        state = tr.carry_state;
    }
    seg.terminal_obs = kind.observe(tape, state)?;
    seg.terminal_obs_values = tape.value(seg.terminal_obs)?;
    Ok(seg)
}

/// Per-reward coefficients `H x N` and terminal-value weights `N` of the
/// surrogate. The discount restarts after an episode boundary and the value
/// at a boundary is replaced by 0, unless `bootstrap_at_reset` is set.
pub fn surrogate_weights(done: &[Vec<bool>], gamma: f64, bootstrap_at_reset: bool) -> (Tensor, Vec<f64>) {
    let h = done.len();
    let n = done.first().map_or(0, Vec::len);
    let mut w = Tensor::zeros(h, n);
    let mut terminal = vec![0.0; n];
    for i in 0..n {
        let mut disc = 1.0;
        for t in 0..h {
            w.set(t, i, disc);
            if done[t][i] && !bootstrap_at_reset {
                disc = 1.0;
                terminal[i] = if t + 1 == h { 0.0 } else { 1.0 };
            } else {
                disc *= gamma;
            }
        }
        if !(h > 0 && done[h - 1][i] && !bootstrap_at_reset) {
            terminal[i] = disc;
        }
    }
    (w, terminal)
}

/// `J = mean_i [ sum_t gamma^t r_t + gamma^H V(s_H) ]` on the tape, with the
/// critics' weights held constant.
pub fn surrogate(
    tape: &Tape,
    seg: &Segment,
    critics: &CriticPair,
    norm: &ObsNormalizer,
    gamma: f64,
    bootstrap_at_reset: bool,
) -> Result<Var, RpgError> {
    let h = seg.horizon();
    if h == 0 {
        return Err(RpgError::EmptyHorizon);
    }
    let n = seg.reward_values.cols();
    let (w, terminal) = surrogate_weights(&seg.done, gamma, bootstrap_at_reset);
    let rewards = tape.concat(&seg.rewards)?;
    let weighted = tape.mul(rewards, tape.constant(w.transpose()))?;
    let v = critics.value_on_tape(tape, norm.normalize(tape, seg.terminal_obs)?)?;
    let boot = tape.mul(v, tape.constant(Tensor::column(&terminal)))?;
    let total = tape.add(tape.sum(weighted)?, tape.sum(boot)?)?;
    Ok(tape.scale(total, 1.0 / n as f64)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub c_past: f64,
    pub c_uni: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            c_past: 0.2,
            c_uni: 0.2,
        }
    }
}

/// `-J + c_past * L_past + c_uni * L_uni`; absent terms count as zero.
pub fn policy_loss(tape: &Tape, j: Var, past: Option<Var>, uni: Option<Var>, w: LossWeights) -> Result<Var, TapeError> {
    let mut loss = tape.neg(j)?;
    if let Some(p) = past {
        loss = tape.add(loss, tape.scale(p, w.c_past)?)?;
    }
    if let Some(u) = uni {
        loss = tape.add(loss, tape.scale(u, w.c_uni)?)?;
    }
    Ok(loss)
}

/// Clips `grads` to `clip` global norm and takes one AdamW step.
/// Returns the norms before and after clipping.
pub fn actor_update(
    net: &mut MlpParams,
    opt: &mut AdamW,
    mut grads: Vec<Tensor>,
    clip: f64,
    lr: f64,
    iteration: u64,
) -> Result<(f64, f64), RpgError> {
    use crate::net::ParamSet;
    if let Some((name, _)) = net.names().into_iter().zip(&grads).find(|(_, g)| !g.all_finite()) {
        return Err(RpgError::NonFiniteGrad { iteration, block: name });
    }
    let norms = clip_global_norm(&mut grads, clip);
    opt.step(net, &grads, lr)?;
    Ok(norms)
}
