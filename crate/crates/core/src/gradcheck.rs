//! Finite-difference checks of every differentiable block against the tape.
//!
//! Each row perturbs randomly chosen inputs or parameters with central
//! differences and reports the worst relative error
//! `|analytic - fd| / (|fd| + 1e-8)`.

use rand::Rng;
use thiserror::Error;

use crate::cfm::{self, CfmBatch, CfmError};
use crate::critic::CriticPair;
use crate::env::{BatchedEnv, EnvError, EnvKind, EnvSpec, ObsNormalizer};
use crate::flow::{self, FlowConfig, FlowError, FlowPolicy};
use crate::net::{mlp_forward, AdamWConfig, MlpParams, NetError, ParamSet};
use crate::rng;
use crate::rpg::{self, GaussianPolicy, Policy, RpgError};
use crate::tape::{self, Tape, TapeError, Var};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum GradCheckError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Cfm(#[from] CfmError),
    #[error(transparent)]
    Rpg(#[from] RpgError),
}

type Result<T> = std::result::Result<T, GradCheckError>;

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub module: &'static str,
    pub quantity: String,
    pub checked: usize,
    pub max_rel: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_rel < TOLERANCE
    }
}

pub fn rel_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (fd.abs() + 1e-8)
}

/// `count` distinct flat parameter positions, uniform over all entries.
pub fn pick_params(net: &MlpParams, count: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let sizes: Vec<usize> = net.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut flat = rand::seq::index::sample(rng, total, count.min(total)).into_vec();
    flat.sort_unstable();
    flat.into_iter()
        .map(|mut k| {
            let mut b = 0;
            while k >= sizes[b] {
                k -= sizes[b];
                b += 1;
            }
            (b, k)
        })
        .collect()
}

/// Worst relative error of `grads` at `picks` against central differences of
/// `f` over the parameters of `net`.
pub fn check_params(
    net: &MlpParams,
    grads: &[Tensor],
    picks: &[(usize, usize)],
    mut f: impl FnMut(&MlpParams) -> Result<f64>,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for &(b, k) in picks {
        let mut plus = net.clone();
        plus.tensors_mut()[b].data_mut()[k] += STEP;
        let mut minus = net.clone();
        minus.tensors_mut()[b].data_mut()[k] -= STEP;
        let fd = (f(&plus)? - f(&minus)?) / (2.0 * STEP);
        worst = worst.max(rel_error(grads[b].data()[k], fd));
    }
    Ok(worst)
}

fn row(module: &'static str, quantity: impl Into<String>, checked: usize, max_rel: f64) -> GradRow {
    GradRow {
        module,
        quantity: quantity.into(),
        checked,
        max_rel,
    }
}

fn tape_rows(rng: &mut impl Rng) -> Result<Vec<GradRow>> {
    let x = Tensor::from_vec(3, 4, (0..12).map(|_| rng.random_range(-0.9..0.9)).collect());
    let w = Tensor::from_vec(4, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect());
    let gamma = Tensor::from_vec(1, 4, vec![1.1, 0.9, 1.3, 0.7]);
    let beta = Tensor::from_vec(1, 4, vec![0.1, -0.2, 0.0, 0.3]);
    type F = fn(&Tape, Var, &[Tensor]) -> std::result::Result<Var, TapeError>;
    let cases: [(&str, F); 5] = [
        ("elementwise chain", |t, x, _| {
            let a = t.mul(t.tanh(x)?, t.sin(x)?)?;
            let b = t.div(t.silu(x)?, t.offset(t.exp(x)?, 1.0)?)?;
            t.sum(t.add(t.square(a)?, t.cos(b)?)?)
        }),
        ("atanh, sqrt, ln", |t, x, _| {
            let a = t.atanh(t.scale(x, 0.9)?)?;
            let b = t.ln(t.offset(t.square(x)?, 1.0)?)?;
            t.sum(t.add(t.mul(a, b)?, t.sqrt(t.offset(t.square(x)?, 0.5)?)?)?)
        }),
        ("matmul", |t, x, c| {
            let w = t.constant(c[0].clone());
            t.sum(t.square(t.matmul(x, w)?)?)
        }),
        ("layer norm", |t, x, c| {
            let y = t.layer_norm(x, t.constant(c[1].clone()), t.constant(c[2].clone()))?;
            t.sum(t.mul(y, t.sin(x)?)?)
        }),
        ("slice, concat, norms", |t, x, _| {
            let a = t.slice_cols(x, 0, 2)?;
            let b = t.slice_cols(x, 2, 4)?;
            let c = t.concat(&[b, a])?;
            t.mean(t.mul(t.square_norm(c)?, t.row_sum(t.mul(x, c)?)?)?)
        }),
    ];
    let consts = [w, gamma, beta];
    let mut rows = Vec::new();
    for (name, f) in cases {
        let err = tape::grad_check(|t, v| f(t, v, &consts), &x, STEP)?;
        rows.push(row("tape", name, x.len(), err));
    }
    Ok(rows)
}

fn net_row(rng: &mut impl Rng) -> Result<GradRow> {
    let net = MlpParams::new(&[3, 16, 16, 2], rng)?;
    let x = rng::gaussian(rng, 5, 3);
    let value = |p: &MlpParams, trainable: bool| -> Result<(Tape, Var, Vec<Var>)> {
        let tape = Tape::new();
        let vars = p.inject(&tape, trainable);
        let y = mlp_forward(&tape, &vars, tape.constant(x.clone()))?;
        let l = tape.sum(tape.sin(y)?)?;
        Ok((tape, l, vars.vars()))
    };
    let (tape, l, vs) = value(&net, true)?;
    let g = tape.backward(l)?;
    let grads: Vec<Tensor> = vs.iter().map(|v| g.get(*v)).collect();
    let picks = pick_params(&net, 20, rng);
    let err = check_params(&net, &grads, &picks, |p| {
        let (t, l, _) = value(p, false)?;
        Ok(t.scalar(l)?)
    })?;
    Ok(row("net", "mlp output", picks.len(), err))
}

fn env_rows(rng: &mut impl Rng) -> Result<Vec<GradRow>> {
    let mut rows = Vec::new();
    for kind in [EnvKind::PointMass, EnvKind::DoubleIntegrator, EnvKind::Pendulum] {
        let s0 = BatchedEnv::new(EnvSpec::new(kind, 100), 4, rng.random())
            .states()
            .clone();
        let s0 = s0.map(|v| v + 0.1);
        let a0 = Tensor::from_vec(
            4,
            kind.act_dim(),
            (0..4 * kind.act_dim()).map(|_| rng.random_range(-0.8..0.8)).collect(),
        );
        let mix = rng::gaussian(rng, 4, kind.state_dim());
        // scalar that touches both the next state and the reward
        let combine = |t: &Tape, next: Var, r: Var| -> std::result::Result<Var, TapeError> {
            let s = t.sum(t.mul(next, t.constant(mix.clone()))?)?;
            t.add(s, t.sum(r)?)
        };
        let err_s = tape::grad_check(
            |t, s| {
                let (n, r) = kind.dynamics(t, s, t.constant(a0.clone())).map_err(env_to_tape)?;
                combine(t, n, r)
            },
            &s0,
            STEP,
        )?;
        let err_a = tape::grad_check(
            |t, a| {
                let (n, r) = kind.dynamics(t, t.constant(s0.clone()), a).map_err(env_to_tape)?;
                combine(t, n, r)
            },
            &a0,
            STEP,
        )?;
        rows.push(row("env", format!("{} step wrt state", kind.name()), s0.len(), err_s));
        rows.push(row("env", format!("{} step wrt action", kind.name()), a0.len(), err_a));
    }
    Ok(rows)
}

fn env_to_tape(e: EnvError) -> TapeError {
    match e {
        EnvError::Tape(t) => t,
        other => TapeError::NonFinite(other.to_string()),
    }
}

fn flow_row(rng: &mut impl Rng) -> Result<GradRow> {
    let p = FlowPolicy::new(3, 2, &[16, 16], FlowConfig::default(), rng)?;
    let obs = rng::gaussian(rng, 4, 3);
    let noise = rng::gaussian(rng, 4, 2);
    let w = rng::gaussian(rng, 4, 2);
    let value = |net: &MlpParams, trainable: bool| -> Result<(Tape, Var, Vec<Var>)> {
        let tape = Tape::new();
        let vars = net.inject(&tape, trainable);
        let s = flow::sample_action(
            &tape,
            &vars,
            &p.cfg,
            tape.constant(obs.clone()),
            tape.constant(noise.clone()),
        )?;
        let l = tape.sum(tape.mul(s.action, tape.constant(w.clone()))?)?;
        Ok((tape, l, vars.vars()))
    };
    let (tape, l, vs) = value(&p.net, true)?;
    let g = tape.backward(l)?;
    let grads: Vec<Tensor> = vs.iter().map(|v| g.get(*v)).collect();
    let picks = pick_params(&p.net, 20, rng);
    let err = check_params(&p.net, &grads, &picks, |net| {
        let (t, l, _) = value(net, false)?;
        Ok(t.scalar(l)?)
    })?;
    Ok(row("flow", format!("euler chain K={}", p.cfg.steps), picks.len(), err))
}

fn cfm_row(rng: &mut impl Rng) -> Result<GradRow> {
    let p = FlowPolicy::new(3, 2, &[16, 16], FlowConfig::default(), rng)?;
    let batch = CfmBatch {
        obs: rng::gaussian(rng, 16, 3),
        targets: rng::gaussian(rng, 16, 2),
        noise: rng::gaussian(rng, 16, 2),
        u: Tensor::from_vec(16, 1, (0..16).map(|_| rng.random::<f64>()).collect()),
    };
    let norm = ObsNormalizer::new(3, true);
    let value = |net: &MlpParams, trainable: bool| -> Result<(Tape, Var, Vec<Var>)> {
        let tape = Tape::new();
        let vars = net.inject(&tape, trainable);
        let l = cfm::cfm_loss(&tape, &vars, &batch, &norm)?;
        Ok((tape, l, vars.vars()))
    };
    let (tape, l, vs) = value(&p.net, true)?;
    let g = tape.backward(l)?;
    let grads: Vec<Tensor> = vs.iter().map(|v| g.get(*v)).collect();
    let picks = pick_params(&p.net, 20, rng);
    let err = check_params(&p.net, &grads, &picks, |net| {
        let (t, l, _) = value(net, false)?;
        Ok(t.scalar(l)?)
    })?;
    Ok(row("cfm", "flow matching loss", picks.len(), err))
}

fn critic_row(rng: &mut impl Rng) -> Result<GradRow> {
    let net = MlpParams::new(&[4, 16, 16, 1], rng)?;
    let x = rng::gaussian(rng, 8, 4);
    let y = rng::gaussian(rng, 8, 1);
    let value = |p: &MlpParams, trainable: bool| -> Result<(Tape, Var, Vec<Var>)> {
        let tape = Tape::new();
        let vars = p.inject(&tape, trainable);
        let pred = mlp_forward(&tape, &vars, tape.constant(x.clone()))?;
        let l = tape.mean(tape.square(tape.sub(pred, tape.constant(y.clone()))?)?)?;
        Ok((tape, l, vars.vars()))
    };
    let (tape, l, vs) = value(&net, true)?;
    let g = tape.backward(l)?;
    let grads: Vec<Tensor> = vs.iter().map(|v| g.get(*v)).collect();
    let picks = pick_params(&net, 20, rng);
    let err = check_params(&net, &grads, &picks, |p| {
        let (t, l, _) = value(p, false)?;
        Ok(t.scalar(l)?)
    })?;
    Ok(row("critic", "value regression loss", picks.len(), err))
}

/// Setup of the surrogate check: point-mass, `H = 8`, `K = 4`, `N = 2`.
pub struct SurrogateCase {
    pub policy: Policy,
    pub env: BatchedEnv,
    pub critics: CriticPair,
    pub norm: ObsNormalizer,
    pub noise: Vec<Tensor>,
    pub horizon: usize,
}

impl SurrogateCase {
    pub fn new(seed: u64, gaussian: bool) -> Result<Self> {
        let kind = EnvKind::PointMass;
        let (h, n) = (8, 2);
        let mut r = rng::stream(seed, rng::streams::INIT);
        let policy = if gaussian {
            Policy::Gaussian(GaussianPolicy::new(kind.obs_dim(), kind.act_dim(), &[16, 16], &mut r)?)
        } else {
            let cfg = FlowConfig {
                steps: 4,
                ..Default::default()
            };
            Policy::Flow(FlowPolicy::new(kind.obs_dim(), kind.act_dim(), &[16, 16], cfg, &mut r)?)
        };
        let critics = CriticPair::new(kind.obs_dim(), &[16, 16], AdamWConfig::default(), &mut r)?;
        let mut nr = rng::stream(seed, rng::streams::NOISE);
        let noise = rpg::draw_noise(&mut nr, n, policy.width(), h, policy.chunk());
        Ok(Self {
            policy,
            env: BatchedEnv::new(EnvSpec::new(kind, 100), n, seed),
            critics,
            norm: ObsNormalizer::new(kind.obs_dim(), true),
            noise,
            horizon: h,
        })
    }

    fn run(&self, policy: &Policy, trainable: bool) -> Result<(Tape, Var, Vec<Var>)> {
        let tape = Tape::new();
        let vars = policy.net().inject(&tape, trainable);
        let mut env = self.env.clone();
        let seg = rpg::rollout_segment(
            &tape,
            policy,
            &vars,
            &mut env,
            &self.norm,
            self.horizon,
            &self.noise,
            false,
        )?;
        let j = rpg::surrogate(&tape, &seg, &self.critics, &self.norm, 0.99, false)?;
        Ok((tape, j, vars.vars()))
    }

    pub fn value(&self, policy: &Policy) -> Result<f64> {
        let (t, j, _) = self.run(policy, false)?;
        Ok(t.scalar(j)?)
    }

    pub fn gradient(&self) -> Result<Vec<Tensor>> {
        let (t, j, vs) = self.run(&self.policy, true)?;
        let g = t.backward(j)?;
        Ok(vs.iter().map(|v| g.get(*v)).collect())
    }

    /// Worst relative error over `count` random actor parameters.
    pub fn check(&self, count: usize, rng: &mut impl Rng) -> Result<(usize, f64)> {
        let grads = self.gradient()?;
        let picks = pick_params(self.policy.net(), count, rng);
        let err = check_params(self.policy.net(), &grads, &picks, |net| {
            let mut p = self.policy.clone();
            *p.net_mut() = net.clone();
            self.value(&p)
        })?;
        Ok((picks.len(), err))
    }
}

/// The full suite, one row per checked quantity.
pub fn run(seed: u64) -> Result<Vec<GradRow>> {
    let mut r = rng::stream(seed, rng::streams::DIAG);
    let mut rows = tape_rows(&mut r)?;
    rows.push(net_row(&mut r)?);
    rows.extend(env_rows(&mut r)?);
    rows.push(flow_row(&mut r)?);
    rows.push(cfm_row(&mut r)?);
    rows.push(critic_row(&mut r)?);
    let (n, e) = SurrogateCase::new(seed, false)?.check(20, &mut r)?;
    rows.push(row("rpg", "surrogate, flow policy", n, e));
    let (n, e) = SurrogateCase::new(seed, true)?.check(20, &mut r)?;
    rows.push(row("rpg", "surrogate, gaussian policy", n, e));
    Ok(rows)
}
