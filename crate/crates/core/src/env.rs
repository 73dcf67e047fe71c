//! Deterministic, analytically differentiable toy environments.
//!
//! Dynamics and rewards are built on the tape, so `d s'/d s` and `d s'/d a`
//! are available to the policy gradient. All environments share `dt = 0.05`,
//! actions in `[-1, 1]^d`, and no early termination: an episode ends only
//! when its step counter reaches the episode length.
//!
//! | name              | state        | observation        | rho_0                              |
//! |-------------------|--------------|--------------------|------------------------------------|
//! | `point-mass`      | (pos, vel)   | state              | pos ~ U[-1,1]^2, vel = 0           |
//! | `point-mass-free` | (pos, vel)   | state              | as above; reward is identically 0  |
//! | `double-integrator` | (x, v)     | state              | x ~ U[-1,1], v = 0                 |
//! | `pendulum`        | (theta, w)   | (cos, sin, w)      | theta ~ U[-pi,pi], w ~ U[-1,1]     |

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::rng::{self, RunRng};
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::Tensor;

pub const DT: f64 = 0.05;
pub const DEFAULT_EPISODE_LEN: usize = 100;
const ACTION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment {0:?}")]
    Unknown(String),
    #[error("action {value} outside [-1, 1] (instance {instance})")]
    ActionOutOfBounds { instance: usize, value: f64 },
    #[error("instance index {0} out of range")]
    BadIndex(usize),
    #[error("state batch is {got:?}, environment expects {expected:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EnvKind {
    PointMass,
    PointMassFree,
    DoubleIntegrator,
    Pendulum,
}

impl EnvKind {
    pub const ALL: [EnvKind; 4] = [
        EnvKind::PointMass,
        EnvKind::PointMassFree,
        EnvKind::DoubleIntegrator,
        EnvKind::Pendulum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointMass => "point-mass",
            EnvKind::PointMassFree => "point-mass-free",
            EnvKind::DoubleIntegrator => "double-integrator",
            EnvKind::Pendulum => "pendulum",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            EnvKind::PointMass | EnvKind::PointMassFree => 4,
            EnvKind::DoubleIntegrator | EnvKind::Pendulum => 2,
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            EnvKind::PointMass | EnvKind::PointMassFree => 4,
            EnvKind::DoubleIntegrator => 2,
            EnvKind::Pendulum => 3,
        }
    }

    pub fn act_dim(self) -> usize {
        match self {
            EnvKind::PointMass | EnvKind::PointMassFree => 2,
            EnvKind::DoubleIntegrator | EnvKind::Pendulum => 1,
        }
    }

    /// Samples initial states for `n` instances.
    pub fn initial_states(self, n: usize, rng: &mut RunRng) -> Tensor {
        let mut s = Tensor::zeros(n, self.state_dim());
        for i in 0..n {
            match self {
                EnvKind::PointMass | EnvKind::PointMassFree => {
                    let p = rng::uniform(rng, 1, 2, -1.0, 1.0);
                    s.set(i, 0, p.data()[0]);
                    s.set(i, 1, p.data()[1]);
                }
                EnvKind::DoubleIntegrator => {
                    s.set(i, 0, rng::uniform(rng, 1, 1, -1.0, 1.0).item());
                }
                EnvKind::Pendulum => {
                    let p = rng::uniform(rng, 1, 2, -1.0, 1.0);
                    s.set(i, 0, std::f64::consts::PI * p.data()[0]);
                    s.set(i, 1, p.data()[1]);
                }
            }
        }
        s
    }

    /// Observation of a state batch, on the tape.
    pub fn observe(self, tape: &Tape, state: Var) -> Result<Var, EnvError> {
        Ok(match self {
            EnvKind::Pendulum => {
                let th = tape.slice_cols(state, 0, 1)?;
                let w = tape.slice_cols(state, 1, 2)?;
                let c = tape.cos(th)?;
                let s = tape.sin(th)?;
                tape.concat(&[c, s, w])?
            }
            _ => state,
        })
    }

    pub fn observe_values(self, state: &Tensor) -> Result<Tensor, EnvError> {
        let tape = Tape::new();
        let s = tape.constant(state.clone());
        let o = self.observe(&tape, s)?;
        Ok(tape.value(o)?)
    }

    /// One transition `(s, a) -> (s', r(s, a))` on the tape. `r` is `n x 1`.
    pub fn dynamics(self, tape: &Tape, state: Var, action: Var) -> Result<(Var, Var), EnvError> {
        let n = state.rows();
        if state.cols() != self.state_dim() {
            return Err(EnvError::Shape {
                expected: (n, self.state_dim()),
                got: state.shape(),
            });
        }
        if action.shape() != (n, self.act_dim()) {
            return Err(EnvError::Shape {
                expected: (n, self.act_dim()),
                got: action.shape(),
            });
        }
        match self {
            EnvKind::PointMass | EnvKind::PointMassFree => {
                let pos = tape.slice_cols(state, 0, 2)?;
                let vel = tape.slice_cols(state, 2, 4)?;
                let pos2 = tape.add(pos, tape.scale(vel, DT)?)?;
                let vel2 = tape.add(vel, tape.scale(action, 2.0 * DT)?)?;
                let next = tape.concat(&[pos2, vel2])?;
                let reward = if self == EnvKind::PointMassFree {
                    tape.constant(Tensor::zeros(n, 1))
                } else {
                    // goal at the origin
                    let dist = tape.square_norm(pos)?;
                    let ctrl = tape.scale(tape.square_norm(action)?, 0.01)?;
                    tape.neg(tape.add(dist, ctrl)?)?
                };
                Ok((next, reward))
            }
            EnvKind::DoubleIntegrator => {
                let x = tape.slice_cols(state, 0, 1)?;
                let v = tape.slice_cols(state, 1, 2)?;
                let x2 = tape.add(x, tape.scale(v, DT)?)?;
                let v2 = tape.add(v, tape.scale(action, 2.0 * DT)?)?;
                let next = tape.concat(&[x2, v2])?;
                let cost = tape.add(tape.square(x)?, tape.scale(tape.square(v)?, 0.1)?)?;
                let cost = tape.add(cost, tape.scale(tape.square(action)?, 0.01)?)?;
                Ok((next, tape.neg(cost)?))
            }
            EnvKind::Pendulum => {
                let th = tape.slice_cols(state, 0, 1)?;
                let w = tape.slice_cols(state, 1, 2)?;
                let accel = tape.add(tape.scale(tape.sin(th)?, -10.0)?, tape.scale(action, 4.0)?)?;
                let accel = tape.sub(accel, tape.scale(w, 0.05)?)?;
                let w2 = tape.add(w, tape.scale(accel, DT)?)?;
                let th2 = tape.add(th, tape.scale(w2, DT)?)?;
                let next = tape.concat(&[th2, w2])?;
                let err = upright_error(tape, th)?;
                let cost = tape.add(tape.square(err)?, tape.scale(tape.square(w)?, 0.1)?)?;
                let cost = tape.add(cost, tape.scale(tape.square(action)?, 0.001)?)?;
                Ok((next, tape.neg(cost)?))
            }
        }
    }
}

/// Signed angle from upright (`theta = pi`), wrapped to `[-pi, pi)`.
/// The wrap is a piecewise-constant offset, so the derivative is 1.
fn upright_error(tape: &Tape, theta: Var) -> Result<Var, TapeError> {
    use std::f64::consts::PI;
    let offsets = tape.with_value(theta, |t| {
        t.map(|th| {
            let d = th - PI;
            let wrapped = (d + PI).rem_euclid(2.0 * PI) - PI;
            wrapped - d
        })
    })?;
    let shifted = tape.offset(theta, -PI)?;
    tape.add(shifted, tape.constant(offsets))
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "point-mass" | "point-mass-reach" => Ok(EnvKind::PointMass),
            "point-mass-free" => Ok(EnvKind::PointMassFree),
            "double-integrator" => Ok(EnvKind::DoubleIntegrator),
            "pendulum" | "pendulum-swingup" => Ok(EnvKind::Pendulum),
            other => Err(EnvError::Unknown(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub obs_dim: usize,
    pub act_dim: usize,
    pub episode_len: usize,
    pub dt: f64,
}

impl EnvSpec {
    pub fn new(kind: EnvKind, episode_len: usize) -> Self {
        Self {
            kind,
            obs_dim: kind.obs_dim(),
            act_dim: kind.act_dim(),
            episode_len,
            dt: DT,
        }
    }
}

/// Output of [`BatchedEnv::step`].
#[derive(Clone, Debug)]
pub struct Transition {
    /// `s_{t+1}` as produced by the dynamics (pre-reset).
    pub next_state: Var,
    pub reward: Var,
    pub done: Vec<bool>,
    /// State the next step starts from: `next_state` with finished
    /// instances replaced by fresh (constant) initial states.
    pub carry_state: Var,
}

/// `N` instances of one environment advanced together.
#[derive(Clone, Debug)]
pub struct BatchedEnv {
    spec: EnvSpec,
    states: Tensor,
    steps: Vec<usize>,
    reset_rng: RunRng,
}

impl BatchedEnv {
    pub fn new(spec: EnvSpec, n: usize, seed: u64) -> Self {
        let mut reset_rng = rng::stream(seed, rng::streams::ENV_RESET);
        let states = spec.kind.initial_states(n, &mut reset_rng);
        Self {
            spec,
            states,
            steps: vec![0; n],
            reset_rng,
        }
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn kind(&self) -> EnvKind {
        self.spec.kind
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn states(&self) -> &Tensor {
        &self.states
    }

    pub fn step_counters(&self) -> &[usize] {
        &self.steps
    }

    pub fn observations(&self) -> Result<Tensor, EnvError> {
        self.spec.kind.observe_values(&self.states)
    }

    /// Redraws the listed instances from rho_0 with a generator seeded by
    /// `seed`, zeroes their counters, and returns their observations.
    pub fn reset(&mut self, indices: &[usize], seed: u64) -> Result<Tensor, EnvError> {
        let mut r = rng::stream(seed, rng::streams::ENV_RESET);
        self.reset_from(indices, &mut r)
    }

    fn reset_from(&mut self, indices: &[usize], r: &mut RunRng) -> Result<Tensor, EnvError> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(EnvError::BadIndex(bad));
        }
        let fresh = self.spec.kind.initial_states(indices.len(), r);
        for (k, &i) in indices.iter().enumerate() {
            for c in 0..self.states.cols() {
                self.states.set(i, c, fresh.get(k, c));
            }
            self.steps[i] = 0;
        }
        let obs = self.spec.kind.observe_values(&self.states.select_rows(indices))?;
        Ok(obs)
    }

    /// Advances every instance by one step. `state` must carry the current
    /// state values (usually the previous `carry_state`, or a constant of
    /// [`Self::states`] at the start of a segment).
    pub fn step(&mut self, tape: &Tape, state: Var, action: Var) -> Result<Transition, EnvError> {
        let bad = tape.with_value(action, |a| {
            a.data()
                .iter()
                .position(|v| v.abs() > 1.0 + ACTION_TOL)
                .map(|i| (i / a.cols(), a.data()[i]))
        })?;
        if let Some((instance, value)) = bad {
            return Err(EnvError::ActionOutOfBounds { instance, value });
        }
        let (next_state, reward) = self.spec.kind.dynamics(tape, state, action)?;
        let mut done = Vec::with_capacity(self.len());
        for s in &mut self.steps {
            *s += 1;
            done.push(*s >= self.spec.episode_len);
        }
        let mut next_values = tape.value(next_state)?;
        let finished: Vec<usize> = (0..self.len()).filter(|&i| done[i]).collect();
        let carry_state = if finished.is_empty() {
            next_state
        } else {
            let mut r = std::mem::replace(&mut self.reset_rng, rng::stream(0, 0));
            self.states = next_values.clone();
            self.reset_from(&finished, &mut r)?;
            self.reset_rng = r;
            let mut keep = Tensor::filled(self.len(), 1, 1.0);
            let mut fresh = Tensor::zeros(self.len(), self.states.cols());
            for &i in &finished {
                keep.set(i, 0, 0.0);
                for c in 0..self.states.cols() {
                    fresh.set(i, c, self.states.get(i, c));
                }
            }
            next_values = self.states.clone();
            let kept = tape.mul(next_state, tape.constant(keep))?;
            tape.add(kept, tape.constant(fresh))?
        };
        self.states = next_values;
        Ok(Transition {
            next_state,
            reward,
            done,
            carry_state,
        })
    }
}

/// Running mean / variance of observations (parallel Welford merge).
#[derive(Clone, Debug, PartialEq)]
pub struct ObsNormalizer {
    pub enabled: bool,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: f64,
}

impl ObsNormalizer {
    pub const EPS: f64 = 1e-8;

    pub fn new(dim: usize, enabled: bool) -> Self {
        Self {
            enabled,
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
            count: 1e-4,
        }
    }

    pub fn from_parts(enabled: bool, mean: Vec<f64>, var: Vec<f64>, count: f64) -> Self {
        Self {
            enabled,
            mean,
            var,
            count,
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn var(&self) -> &[f64] {
        &self.var
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    /// Merges a batch of observations (rows) into the running statistics.
    pub fn update(&mut self, batch: &Tensor) {
        if !self.enabled || batch.rows() == 0 {
            return;
        }
        let n = batch.rows() as f64;
        let total = self.count + n;
        for c in 0..batch.cols() {
            let bm = (0..batch.rows()).map(|r| batch.get(r, c)).sum::<f64>() / n;
            let bv = (0..batch.rows()).map(|r| (batch.get(r, c) - bm).powi(2)).sum::<f64>() / n;
            let delta = bm - self.mean[c];
            let m2 = self.var[c] * self.count + bv * n + delta * delta * self.count * n / total;
            self.mean[c] += delta * n / total;
            self.var[c] = m2 / total;
        }
        self.count = total;
    }

    fn rows(&self) -> (Tensor, Tensor) {
        let std: Vec<f64> = self.var.iter().map(|v| (v + Self::EPS).sqrt()).collect();
        (Tensor::row(&self.mean), Tensor::row(&std))
    }

    pub fn normalize(&self, tape: &Tape, obs: Var) -> Result<Var, TapeError> {
        if !self.enabled {
            return Ok(obs);
        }
        let (m, s) = self.rows();
        let centered = tape.sub(obs, tape.constant(m))?;
        tape.div(centered, tape.constant(s))
    }

    /// Tape-free twin of [`Self::normalize`], bit-identical.
    pub fn normalize_values(&self, obs: &Tensor) -> Tensor {
        if !self.enabled {
            return obs.clone();
        }
        use crate::tensor::{broadcast_apply, Broadcast};
        let (m, s) = self.rows();
        let centered = broadcast_apply(obs, &m, Broadcast::Row, |a, b| a - b);
        broadcast_apply(&centered, &s, Broadcast::Row, |a, b| a / b)
    }
}
