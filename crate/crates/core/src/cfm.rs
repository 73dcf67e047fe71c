//! Conditional flow matching regularizers.
//!
//! Both losses regress the vector field onto straight-line displacements:
//! `E || v(psi_u, u | s) - (a - eps) ||^2` with `psi_u = (1 - u) eps + u a`.
//! The past-data loss draws `(s, a)` from the two most recent rollouts; the
//! uniform loss pairs visited states with targets uniform over the bounded
//! action space, mapped back to pre-tanh space.

use rand::Rng;
use thiserror::Error;

use crate::env::ObsNormalizer;
use crate::net::{mlp_forward, MlpVars, NetError};
use crate::rng;
use crate::tape::{Tape, TapeError, Var};
use crate::tensor::{self, Tensor};

/// Shrink applied before `atanh` so uniform draws near +-1 stay finite.
pub const ATANH_SHRINK: f64 = 1.0 - 1e-6;

#[derive(Debug, Error)]
pub enum CfmError {
    #[error("recent-action buffer is empty")]
    EmptyBuffer,
    #[error("rollout state set is empty")]
    EmptyStates,
    #[error("pairs have {obs} observations but {targets} targets")]
    Misaligned { obs: usize, targets: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// `(1 - u) eps + u a`, with `u` a column (one flow time per row).
pub fn interpolate(eps: &Tensor, a: &Tensor, u: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(eps.rows(), eps.cols());
    for r in 0..eps.rows() {
        let t = u.get(r, 0);
        for c in 0..eps.cols() {
            out.set(r, c, (1.0 - t) * eps.get(r, c) + t * a.get(r, c));
        }
    }
    out
}

/// Row-aligned raw observations and pre-tanh targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Pairs {
    pub obs: Tensor,
    pub targets: Tensor,
}

impl Pairs {
    pub fn new(obs: Tensor, targets: Tensor) -> Result<Self, CfmError> {
        if obs.rows() != targets.rows() {
            return Err(CfmError::Misaligned {
                obs: obs.rows(),
                targets: targets.rows(),
            });
        }
        Ok(Self { obs, targets })
    }

    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.rows() == 0
    }
}

/// Pairs from the current and the previous iteration.
#[derive(Clone, Debug, Default)]
pub struct RecentBuffer {
    current: Option<Pairs>,
    previous: Option<Pairs>,
}

impl RecentBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    /// previous <- current, current <- `pairs`.
    pub fn push(&mut self, pairs: Pairs) {
        self.previous = self.current.take();
        self.current = Some(pairs);
    }

    pub fn current(&self) -> Option<&Pairs> {
        self.current.as_ref()
    }

    pub fn previous(&self) -> Option<&Pairs> {
        self.previous.as_ref()
    }

    pub fn len(&self) -> usize {
        self.current.as_ref().map_or(0, Pairs::len) + self.previous.as_ref().map_or(0, Pairs::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pair `i` counting through the current slot, then the previous one.
    fn get(&self, i: usize) -> (&[f64], &[f64]) {
        let cur = self.current.as_ref().map_or(0, Pairs::len);
        let p = if i < cur {
            (self.current.as_ref().unwrap(), i)
        } else {
            (self.previous.as_ref().unwrap(), i - cur)
        };
        (p.0.obs.row_slice(p.1), p.0.targets.row_slice(p.1))
    }
}

/// Observations visited in the current rollout.
#[derive(Clone, Debug, Default)]
pub struct RolloutStates {
    obs: Option<Tensor>,
}

impl RolloutStates {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn replace(&mut self, obs: Tensor) {
        self.obs = Some(obs);
    }

    pub fn obs(&self) -> Option<&Tensor> {
        self.obs.as_ref()
    }

    pub fn len(&self) -> usize {
        self.obs.as_ref().map_or(0, Tensor::rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One Monte-Carlo batch: raw observations, targets, noise and flow times.
#[derive(Clone, Debug, PartialEq)]
pub struct CfmBatch {
    pub obs: Tensor,
    pub targets: Tensor,
    pub noise: Tensor,
    pub u: Tensor,
}

/// Uniform draws from the buffer with one fresh `(u, eps)` per pair.
pub fn sample_past_batch(buffer: &RecentBuffer, batch: usize, rng: &mut impl Rng) -> Result<CfmBatch, CfmError> {
    if buffer.is_empty() {
        return Err(CfmError::EmptyBuffer);
    }
    let first = buffer.current().or(buffer.previous()).unwrap();
    let (od, w) = (first.obs.cols(), first.targets.cols());
    let (mut obs, mut targets) = (Tensor::zeros(batch, od), Tensor::zeros(batch, w));
    let (mut noise, mut u) = (Tensor::zeros(batch, w), Tensor::zeros(batch, 1));
    for r in 0..batch {
        let (s, a) = buffer.get(rng.random_range(0..buffer.len()));
        obs.data_mut()[r * od..(r + 1) * od].copy_from_slice(s);
        targets.data_mut()[r * w..(r + 1) * w].copy_from_slice(a);
        u.set(r, 0, rng.random::<f64>());
        noise.data_mut()[r * w..(r + 1) * w].copy_from_slice(rng::gaussian(rng, 1, w).data());
    }
    Ok(CfmBatch { obs, targets, noise, u })
}

/// Maps a uniform draw in `[-1, 1]` to its pre-tanh target.
pub fn uniform_target(a: f64, clamp: f64) -> f64 {
    (a * ATANH_SHRINK).atanh().clamp(-clamp, clamp)
}

/// Visited states paired with uniform action targets of width `w`. With
/// `tanh_targets` the squashed draw itself is the target.
pub fn sample_uniform_batch(
    states: &RolloutStates,
    w: usize,
    batch: usize,
    clamp: f64,
    tanh_targets: bool,
    rng: &mut impl Rng,
) -> Result<CfmBatch, CfmError> {
    let pool = states.obs().filter(|o| o.rows() > 0).ok_or(CfmError::EmptyStates)?;
    let od = pool.cols();
    let (mut obs, mut targets) = (Tensor::zeros(batch, od), Tensor::zeros(batch, w));
    let (mut noise, mut u) = (Tensor::zeros(batch, w), Tensor::zeros(batch, 1));
    for r in 0..batch {
        let i = rng.random_range(0..pool.rows());
        obs.data_mut()[r * od..(r + 1) * od].copy_from_slice(pool.row_slice(i));
        for c in 0..w {
            let a: f64 = rng.random_range(-1.0..=1.0);
            targets.set(r, c, if tanh_targets { a } else { uniform_target(a, clamp) });
        }
        u.set(r, 0, rng.random::<f64>());
        noise.data_mut()[r * w..(r + 1) * w].copy_from_slice(rng::gaussian(rng, 1, w).data());
    }
    Ok(CfmBatch { obs, targets, noise, u })
}

/// Mean squared residual of the field on a batch, on the tape.
pub fn cfm_loss(tape: &Tape, vf: &MlpVars, batch: &CfmBatch, norm: &ObsNormalizer) -> Result<Var, CfmError> {
    let psi = interpolate(&batch.noise, &batch.targets, &batch.u);
    let s = norm.normalize_values(&batch.obs);
    let input = tape.constant(tensor::concat_cols(&[&psi, &batch.u, &s]));
    let v = mlp_forward(tape, vf, input)?;
    let target = batch.targets.zip_map(&batch.noise, |a, e| a - e);
    let resid = tape.sub(v, tape.constant(target))?;
    Ok(tape.mean(tape.square_norm(resid)?)?)
}

pub fn cfm_loss_past(
    tape: &Tape,
    vf: &MlpVars,
    buffer: &RecentBuffer,
    batch: usize,
    norm: &ObsNormalizer,
    rng: &mut impl Rng,
) -> Result<Var, CfmError> {
    let b = sample_past_batch(buffer, batch, rng)?;
    cfm_loss(tape, vf, &b, norm)
}

#[allow(clippy::too_many_arguments)]
pub fn cfm_loss_uniform(
    tape: &Tape,
    vf: &MlpVars,
    states: &RolloutStates,
    w: usize,
    batch: usize,
    clamp: f64,
    tanh_targets: bool,
    norm: &ObsNormalizer,
    rng: &mut impl Rng,
) -> Result<Var, CfmError> {
    let b = sample_uniform_batch(states, w, batch, clamp, tanh_targets, rng)?;
    cfm_loss(tape, vf, &b, norm)
}

/// Kolmogorov-Smirnov distance between samples and Uniform[-1, 1].
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = ((x + 1.0) / 2.0).clamp(0.0, 1.0);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}
