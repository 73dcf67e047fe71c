//! Flow policy: a vector field `v(x, u | s)` integrated with `K` Euler steps
//! from Gaussian noise to a pre-tanh action, then squashed by `tanh`.
//!
//! With chunk size `C > 1` one integration produces `C` consecutive actions
//! laid out side by side (`d * C` columns).

use rand::Rng;
use thiserror::Error;

use crate::net::{mlp_forward, MlpParams, MlpVars, NetError};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::{self, Broadcast, Tensor};

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid flow config: {0}")]
    Config(&'static str),
    #[error("non-finite value in Euler step {step}")]
    NonFinite { step: usize },
    #[error("noise has {got} columns, policy expects {expected}")]
    NoiseWidth { expected: usize, got: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowConfig {
    /// Euler steps `K`.
    pub steps: usize,
    /// Bound `B` applied to stored pre-tanh targets.
    pub clamp: f64,
    /// Actions generated per integration.
    pub chunk: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 4,
            clamp: 3.0,
            chunk: 1,
        }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<(), FlowError> {
        if self.steps == 0 {
            return Err(FlowError::Config("K must be at least 1"));
        }
        if !(self.clamp > 0.0) {
            return Err(FlowError::Config("clamp bound must be positive"));
        }
        if self.chunk == 0 {
            return Err(FlowError::Config("chunk size must be at least 1"));
        }
        Ok(())
    }

    pub fn du(&self) -> f64 {
        1.0 / self.steps as f64
    }

    /// Flow time of step `k`.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.steps as f64
    }
}

/// Vector-field network plus its flow configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowPolicy {
    pub net: MlpParams,
    pub cfg: FlowConfig,
    obs_dim: usize,
    act_dim: usize,
}

impl FlowPolicy {
    pub fn new(
        obs_dim: usize,
        act_dim: usize,
        hidden: &[usize],
        cfg: FlowConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, FlowError> {
        cfg.validate()?;
        let net = MlpParams::new(&Self::sizes(obs_dim, act_dim, hidden, &cfg), rng)?;
        Ok(Self {
            net,
            cfg,
            obs_dim,
            act_dim,
        })
    }

    /// Wraps an existing network; widths must match.
    pub fn from_net(net: MlpParams, obs_dim: usize, act_dim: usize, cfg: FlowConfig) -> Result<Self, FlowError> {
        cfg.validate()?;
        let w = act_dim * cfg.chunk;
        if net.input_width() != w + 1 + obs_dim || net.output_width() != w {
            return Err(FlowError::Config(
                "network widths do not match the action/observation sizes",
            ));
        }
        Ok(Self {
            net,
            cfg,
            obs_dim,
            act_dim,
        })
    }

    pub fn sizes(obs_dim: usize, act_dim: usize, hidden: &[usize], cfg: &FlowConfig) -> Vec<usize> {
        let w = act_dim * cfg.chunk;
        let mut sizes = vec![w + 1 + obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(w);
        sizes
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    /// Columns of one sample, `d * C`.
    pub fn width(&self) -> usize {
        self.act_dim * self.cfg.chunk
    }
}

/// One batched draw from the flow policy, on the tape.
#[derive(Clone, Debug)]
pub struct ActionSample {
    pub noise: Var,
    /// `a_0 = noise, a_1, ..., a_K = pre`.
    pub states: Vec<Var>,
    pub pre: Var,
    pub action: Var,
}

/// Sums a list of equally shaped vars as a balanced binary tree.
fn tree_sum(tape: &Tape, mut parts: Vec<Var>) -> Result<Var, TapeError> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        for pair in parts.chunks(2) {
            next.push(match pair {
                [a, b] => tape.add(*a, *b)?,
                [a] => *a,
                _ => unreachable!(),
            });
        }
        parts = next;
    }
    Ok(parts[0])
}

fn tree_sum_values(mut parts: Vec<Tensor>) -> Tensor {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(a) = it.next() {
            next.push(match it.next() {
                Some(b) => tensor::broadcast_apply(&a, &b, Broadcast::None, |x, y| x + y),
                None => a,
            });
        }
        parts = next;
    }
    parts.pop().expect("at least one part")
}

/// Integrates `a_{k+1} = a_k + du * v(a_k, k/K | obs)` from `a_0 = noise`.
///
/// Intermediate states use the running sum of increments; the endpoint adds
/// the increments to `noise` as a balanced tree, so a constant field `c`
/// gives `noise + c` exactly whenever `K` is a power of two.
pub fn sample_action(
    tape: &Tape,
    vf: &MlpVars,
    cfg: &FlowConfig,
    obs: Var,
    noise: Var,
) -> Result<ActionSample, FlowError> {
    cfg.validate()?;
    let n = obs.rows();
    let du = cfg.du();
    let mut states = vec![noise];
    let mut increments = Vec::with_capacity(cfg.steps);
    let mut running: Option<Var> = None;
    let mut a = noise;
    for k in 0..cfg.steps {
        let u = tape.constant(Tensor::filled(n, 1, cfg.time(k)));
        let input = tape.concat(&[a, u, obs])?;
        let v = mlp_forward(tape, vf, input)?;
        let inc = tape.scale(v, du)?;
        if !tape.with_value(inc, Tensor::all_finite)? {
            return Err(FlowError::NonFinite { step: k });
        }
        increments.push(inc);
        if k + 1 < cfg.steps {
            let r = match running {
                Some(r) => tape.add(r, inc)?,
                None => inc,
            };
            running = Some(r);
            a = tape.add(noise, r)?;
            states.push(a);
        }
    }
    let pre = tape.add(noise, tree_sum(tape, increments)?)?;
    states.push(pre);
    let action = tape.tanh(pre)?;
    Ok(ActionSample {
        noise,
        states,
        pre,
        action,
    })
}

/// [`sample_action`] for a policy whose chunk size may exceed 1; the sample
/// holds `C` actions of width `d`, see [`chunk_action`].
pub fn sample_chunk(
    tape: &Tape,
    vf: &MlpVars,
    policy: &FlowPolicy,
    obs: Var,
    noise: Var,
) -> Result<ActionSample, FlowError> {
    if noise.cols() != policy.width() {
        return Err(FlowError::NoiseWidth {
            expected: policy.width(),
            got: noise.cols(),
        });
    }
    sample_action(tape, vf, &policy.cfg, obs, noise)
}

/// Action `j` of a chunked sample.
pub fn chunk_action(tape: &Tape, sample: &ActionSample, act_dim: usize, j: usize) -> Result<Var, TapeError> {
    tape.slice_cols(sample.action, j * act_dim, (j + 1) * act_dim)
}

/// Tape-free twin of [`sample_action`], bit-identical. Returns `(pre, action)`.
pub fn sample_action_values(
    net: &MlpParams,
    cfg: &FlowConfig,
    obs: &Tensor,
    noise: &Tensor,
) -> Result<(Tensor, Tensor), FlowError> {
    cfg.validate()?;
    let n = obs.rows();
    let du = cfg.du();
    let mut increments = Vec::with_capacity(cfg.steps);
    let mut running: Option<Tensor> = None;
    let mut a = noise.clone();
    for k in 0..cfg.steps {
        let u = Tensor::filled(n, 1, cfg.time(k));
        let input = tensor::concat_cols(&[&a, &u, obs]);
        let inc = net.forward(&input)?.map(|v| v * du);
        if !inc.all_finite() {
            return Err(FlowError::NonFinite { step: k });
        }
        if k + 1 < cfg.steps {
            let r = match running.take() {
                Some(r) => tensor::broadcast_apply(&r, &inc, Broadcast::None, |x, y| x + y),
                None => inc.clone(),
            };
            a = tensor::broadcast_apply(noise, &r, Broadcast::None, |x, y| x + y);
            running = Some(r);
        }
        increments.push(inc);
    }
    let pre = tensor::broadcast_apply(noise, &tree_sum_values(increments), Broadcast::None, |x, y| x + y);
    let action = pre.map(f64::tanh);
    Ok((pre, action))
}

/// Componentwise clamp of pre-tanh targets to `[-bound, bound]`.
pub fn clamp_pretanh(x: &Tensor, bound: f64) -> Tensor {
    x.map(|v| v.clamp(-bound, bound))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tape::grad_check;

    fn constant_field(obs: usize, d: usize, c: &[f64]) -> MlpParams {
        let mut p = MlpParams::zeros(&[d + 1 + obs, 8, d]).unwrap();
        *p.bias_mut(1) = Tensor::row(c);
        p
    }

    #[test]
    fn zero_field_is_identity_flow() {
        let net = MlpParams::zeros(&[2 + 1 + 3, 16, 16, 2]).unwrap();
        let mut r = rng::stream(1, 0);
        let eps = rng::gaussian(&mut r, 5, 2);
        let obs = rng::gaussian(&mut r, 5, 3);
        for k in [1, 2, 3, 4, 8] {
            let cfg = FlowConfig {
                steps: k,
                ..Default::default()
            };
            let tape = Tape::new();
            let vars = net.inject(&tape, true);
            let s = sample_action(
                &tape,
                &vars,
                &cfg,
                tape.constant(obs.clone()),
                tape.constant(eps.clone()),
            )
            .unwrap();
            assert_eq!(tape.value(s.pre).unwrap(), eps);
            assert_eq!(tape.value(s.action).unwrap(), eps.map(f64::tanh));
            assert_eq!(tape.value(s.states[0]).unwrap(), eps);
            assert_eq!(s.states.len(), k + 1);
        }
    }

    #[test]
    fn constant_field_telescopes_exactly() {
        let mut r = rng::stream(2, 0);
        let c = [0.1, -2.75];
        let net = constant_field(3, 2, &c);
        let eps = rng::gaussian(&mut r, 50, 2);
        let obs = rng::gaussian(&mut r, 50, 3);
        let expected = tensor::broadcast_apply(&eps, &Tensor::row(&c), Broadcast::Row, |a, b| a + b);
        for k in [1, 2, 4, 8] {
            let cfg = FlowConfig {
                steps: k,
                ..Default::default()
            };
            let (pre, _) = sample_action_values(&net, &cfg, &obs, &eps).unwrap();
            assert_eq!(pre, expected, "K={k}");
        }
        // other K: exact up to rounding of the partial sums
        for k in [3, 5, 7] {
            let cfg = FlowConfig {
                steps: k,
                ..Default::default()
            };
            let (pre, _) = sample_action_values(&net, &cfg, &obs, &eps).unwrap();
            let err = pre.zip_map(&expected, |a, b| (a - b).abs()).max_abs();
            assert!(err < 1e-14, "K={k}: {err}");
        }
    }

    #[test]
    fn tape_and_plain_sampling_agree_bitwise() {
        let mut r = rng::stream(3, 0);
        let cfg = FlowConfig::default();
        let p = FlowPolicy::new(3, 2, &[16, 16], cfg, &mut r).unwrap();
        let eps = rng::gaussian(&mut r, 7, 2);
        let obs = rng::gaussian(&mut r, 7, 3);
        let tape = Tape::new();
        let vars = p.net.inject(&tape, true);
        let s = sample_action(
            &tape,
            &vars,
            &cfg,
            tape.constant(obs.clone()),
            tape.constant(eps.clone()),
        )
        .unwrap();
        let (pre, act) = sample_action_values(&p.net, &cfg, &obs, &eps).unwrap();
        assert_eq!(tape.value(s.pre).unwrap(), pre);
        assert_eq!(tape.value(s.action).unwrap(), act);
        assert!(act.data().iter().all(|a| a.abs() < 1.0));
        // repeat is bit-identical
        let (pre2, _) = sample_action_values(&p.net, &cfg, &obs, &eps).unwrap();
        assert_eq!(pre, pre2);
    }

    #[test]
    fn chunk_of_one_matches_single_action() {
        let mut r = rng::stream(4, 0);
        let cfg = FlowConfig::default();
        let p = FlowPolicy::new(4, 2, &[8], cfg, &mut r).unwrap();
        let eps = rng::gaussian(&mut r, 3, 2);
        let obs = rng::gaussian(&mut r, 3, 4);
        let tape = Tape::new();
        let vars = p.net.inject(&tape, true);
        let o = tape.constant(obs.clone());
        let e = tape.constant(eps.clone());
        let a = sample_action(&tape, &vars, &cfg, o, e).unwrap();
        let c = sample_chunk(&tape, &vars, &p, o, e).unwrap();
        let first = chunk_action(&tape, &c, 2, 0).unwrap();
        assert_eq!(tape.value(a.action).unwrap(), tape.value(first).unwrap());
    }

    #[test]
    fn zero_field_chunk_splits_tanh_noise() {
        let cfg = FlowConfig {
            chunk: 2,
            ..Default::default()
        };
        let net = MlpParams::zeros(&FlowPolicy::sizes(2, 1, &[8], &cfg)).unwrap();
        let p = FlowPolicy::from_net(net, 2, 1, cfg).unwrap();
        let eps = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.0]]);
        let tape = Tape::new();
        let vars = p.net.inject(&tape, true);
        let s = sample_chunk(
            &tape,
            &vars,
            &p,
            tape.constant(Tensor::zeros(2, 2)),
            tape.constant(eps.clone()),
        )
        .unwrap();
        for j in 0..2 {
            let a = tape.value(chunk_action(&tape, &s, 1, j).unwrap()).unwrap();
            assert_eq!(a, Tensor::column(&[eps.get(0, j).tanh(), eps.get(1, j).tanh()]));
        }
        let bad = tape.constant(Tensor::zeros(2, 3));
        assert!(matches!(
            sample_chunk(&tape, &vars, &p, tape.constant(Tensor::zeros(2, 2)), bad),
            Err(FlowError::NoiseWidth { .. })
        ));
    }

    #[test]
    fn field_reads_flow_time() {
        // output = u through a single linear layer with weight 1 on the u input
        let cfg = FlowConfig {
            steps: 4,
            ..Default::default()
        };
        let mut net = MlpParams::zeros(&[1 + 1 + 1, 1]).unwrap();
        *net.weight_mut(0) = Tensor::column(&[0.0, 1.0, 0.0]);
        let (pre, _) = sample_action_values(&net, &cfg, &Tensor::zeros(1, 1), &Tensor::zeros(1, 1)).unwrap();
        // sum_k du * k/K = (0 + .25 + .5 + .75) / 4
        assert_eq!(pre.item(), 0.375);
        // a field fed a permuted schedule produces a different endpoint
        let mut permuted = net.clone();
        permuted.bias_mut(0).set(0, 0, 0.0);
        let mut a = 0.0;
        for &u in &[0.75, 0.5, 0.25, 0.0] {
            a += 0.25 * permuted.forward(&Tensor::row(&[a, u, 0.0])).unwrap().item();
        }
        let mut b = 0.0;
        for k in 0..4 {
            b += 0.25 * net.forward(&Tensor::row(&[b, cfg.time(k), 0.0])).unwrap().item();
        }
        assert_eq!(a, b, "linear u-field is order invariant");
        let mut mixed = MlpParams::zeros(&[3, 1]).unwrap();
        *mixed.weight_mut(0) = Tensor::column(&[1.0, 1.0, 0.0]);
        let run = |order: &[f64]| {
            let mut x = 0.0;
            for &u in order {
                x += 0.25 * mixed.forward(&Tensor::row(&[x, u, 0.0])).unwrap().item();
            }
            x
        };
        assert_ne!(run(&[0.0, 0.25, 0.5, 0.75]), run(&[0.75, 0.5, 0.25, 0.0]));
    }

    #[test]
    fn non_finite_step_is_reported() {
        let cfg = FlowConfig::default();
        let mut net = MlpParams::zeros(&[3, 1]).unwrap();
        net.bias_mut(0).set(0, 0, f64::INFINITY);
        match sample_action_values(&net, &cfg, &Tensor::zeros(1, 1), &Tensor::zeros(1, 1)) {
            Err(FlowError::NonFinite { step }) => assert_eq!(step, 0),
            other => panic!("{other:?}"),
        }
        let tape = Tape::new();
        let vars = net.inject(&tape, true);
        let r = sample_action(
            &tape,
            &vars,
            &cfg,
            tape.constant(Tensor::zeros(1, 1)),
            tape.constant(Tensor::zeros(1, 1)),
        );
        assert!(matches!(r, Err(FlowError::NonFinite { step: 0 })));
    }

    #[test]
    fn euler_chain_gradient_matches_finite_differences() {
        let mut r = rng::stream(5, 0);
        let cfg = FlowConfig::default();
        for d in [1, 2, 4] {
            let p = FlowPolicy::new(3, d, &[16, 16], cfg, &mut r).unwrap();
            let eps = rng::gaussian(&mut r, 4, d);
            let obs = rng::gaussian(&mut r, 4, 3);
            let weights = rng::gaussian(&mut r, 4, d);
            let sizes = p.net.sizes().to_vec();
            let blocks: Vec<Tensor> = {
                use crate::net::ParamSet;
                p.net.tensors().into_iter().cloned().collect()
            };
            for (bi, block) in blocks.iter().enumerate() {
                let f = |tape: &Tape, x: Var| -> Result<Var, TapeError> {
                    let mut vars: Vec<Var> = blocks.iter().map(|b| tape.constant(b.clone())).collect();
                    vars[bi] = x;
                    let vf = MlpVars::from_vars(&sizes, vars);
                    let s = sample_action(tape, &vf, &cfg, tape.constant(obs.clone()), tape.constant(eps.clone()))
                        .map_err(|e| match e {
                            FlowError::Tape(t) => t,
                            other => panic!("{other}"),
                        })?;
                    tape.sum(tape.mul(s.action, tape.constant(weights.clone()))?)
                };
                let err = grad_check(f, block, 1e-5).unwrap();
                assert!(err < 1e-4, "d={d} block {bi}: {err}");
            }
        }
    }

    #[test]
    fn discretization_error_shrinks_with_more_steps() {
        let mut r = rng::stream(6, 0);
        let p = FlowPolicy::new(2, 2, &[32, 32], FlowConfig::default(), &mut r).unwrap();
        let eps = rng::gaussian(&mut r, 64, 2);
        let obs = rng::gaussian(&mut r, 64, 2);
        let at = |k: usize| {
            let cfg = FlowConfig {
                steps: k,
                ..Default::default()
            };
            sample_action_values(&p.net, &cfg, &obs, &eps).unwrap().0
        };
        let fine = at(1024);
        let gap = |k: usize| at(k).zip_map(&fine, |a, b| (a - b).powi(2)).mean().sqrt();
        let (g4, g64) = (gap(4), gap(64));
        assert!(g64 < g4, "K=4 gap {g4}, K=64 gap {g64}");
        // first-order method: 16x more steps cuts the error by roughly 16x
        assert!(g64 < g4 / 4.0, "K=4 gap {g4}, K=64 gap {g64}");
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(clamp_pretanh(&Tensor::scalar(5.0), 3.0).item(), 3.0);
        assert_eq!(clamp_pretanh(&Tensor::scalar(-0.5), 3.0).item(), -0.5);
        assert_eq!(
            clamp_pretanh(&Tensor::row(&[4.0, -4.0, 0.0]), 3.0),
            Tensor::row(&[3.0, -3.0, 0.0])
        );
    }

    #[test]
    fn config_validation() {
        assert!(FlowConfig {
            steps: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FlowConfig {
            clamp: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(FlowConfig {
            chunk: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        for k in 1..20 {
            let c = FlowConfig {
                steps: k,
                ..Default::default()
            };
            assert_eq!(c.du() * k as f64, 1.0, "K={k}");
        }
    }
}
