//! Policy-change monitors built on per-sample CFM losses.
//!
//! The likelihood ratio between two flow policies is approximated by the
//! difference of their CFM losses on the same `(s, a)` pair, and the KL is
//! estimated with the non-negative `k3` estimator. Both policies see the same
//! `(u, eps)` draws (common random numbers), so a policy compared with itself
//! gives exactly zero.

use rand::Rng;

use crate::env::ObsNormalizer;
use crate::flow::FlowConfig;
use crate::net::{MlpParams, NetError};
use crate::rng;
use crate::tensor::{self, Tensor};

/// Bound on the log-ratio before exponentiation.
pub const LOG_RATIO_CLAMP: f64 = 30.0;

/// Frozen actor: network, flow settings and the observation normalizer it
/// acted with.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicySnapshot {
    net: MlpParams,
    cfg: FlowConfig,
    norm: ObsNormalizer,
}

impl PolicySnapshot {
    pub fn capture(net: &MlpParams, cfg: &FlowConfig, norm: &ObsNormalizer) -> Self {
        Self {
            net: net.clone(),
            cfg: *cfg,
            norm: norm.clone(),
        }
    }

    pub fn net(&self) -> &MlpParams {
        &self.net
    }

    pub fn normalizer(&self) -> &ObsNormalizer {
        &self.norm
    }
}

/// `n` flow times and source draws for each of `pairs` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    pub n: usize,
    /// `(pairs * n) x 1`.
    pub u: Tensor,
    /// `(pairs * n) x w`.
    pub eps: Tensor,
}

pub fn draw(rng: &mut impl Rng, pairs: usize, n: usize, w: usize) -> Draws {
    let rows = pairs * n;
    let u = Tensor::from_vec(rows, 1, (0..rows).map(|_| rng.random::<f64>()).collect());
    let eps = rng::gaussian(rng, rows, w);
    Draws { n, u, eps }
}

/// Monte-Carlo CFM loss of each pair (row of `obs`/`pre`) over its own `n`
/// draws.
pub fn cfm_losses(snap: &PolicySnapshot, obs: &Tensor, pre: &Tensor, draws: &Draws) -> Result<Vec<f64>, NetError> {
    let (p, w, n) = (obs.rows(), pre.cols(), draws.n);
    let s = snap.norm.normalize_values(obs);
    let mut psi = Tensor::zeros(p * n, w);
    let mut target = Tensor::zeros(p * n, w);
    let mut cond = Tensor::zeros(p * n, s.cols());
    for i in 0..p {
        for k in 0..n {
            let r = i * n + k;
            let u = draws.u.get(r, 0);
            for c in 0..w {
                let (e, a) = (draws.eps.get(r, c), pre.get(i, c));
                psi.set(r, c, (1.0 - u) * e + u * a);
                target.set(r, c, a - e);
            }
            cond.data_mut()[r * s.cols()..(r + 1) * s.cols()].copy_from_slice(s.row_slice(i));
        }
    }
    let v = snap.net.forward(&tensor::concat_cols(&[&psi, &draws.u, &cond]))?;
    let mut out = vec![0.0; p];
    for (i, slot) in out.iter_mut().enumerate() {
        let mut total = 0.0;
        for k in 0..n {
            let r = i * n + k;
            for c in 0..w {
                total += (v.get(r, c) - target.get(r, c)).powi(2);
            }
        }
        *slot = total / n as f64;
    }
    Ok(out)
}

/// CFM loss of one `(s, a_pre)` pair over `draws` (which must hold one pair).
pub fn cfm_loss_pointwise(snap: &PolicySnapshot, s: &[f64], a_pre: &[f64], draws: &Draws) -> Result<f64, NetError> {
    Ok(cfm_losses(snap, &Tensor::row(s), &Tensor::row(a_pre), draws)?[0])
}

/// `k3(rho) = (rho - 1) - ln rho` with `ln rho` given. Returns the value and
/// whether the log-ratio had to be clamped.
pub fn k3_from_log(log_rho: f64) -> (f64, bool) {
    let clamped = !(log_rho.abs() <= LOG_RATIO_CLAMP);
    let l = if log_rho.is_nan() {
        0.0
    } else {
        log_rho.clamp(-LOG_RATIO_CLAMP, LOG_RATIO_CLAMP)
    };
    // expm1 keeps the value exact near rho = 1
    ((l.exp_m1() - l).max(0.0), clamped)
}

pub fn k3(rho: f64) -> f64 {
    k3_from_log(rho.ln()).0
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KlEstimate {
    /// Mean `k3` over pairs.
    pub kl: f64,
    /// Pairs whose log-ratio was clamped.
    pub clamped: usize,
    /// Mean CFM loss of the old and new policy on the pairs.
    pub old_loss: f64,
    pub new_loss: f64,
}

/// `KL(old || new)` on pairs generated by `old`, with `rho ~ exp(L_old - L_new)`.
/// `new_draws` may differ from `old_draws` only when common random numbers
/// are switched off.
pub fn kl_estimate(
    old: &PolicySnapshot,
    new: &PolicySnapshot,
    obs: &Tensor,
    pre: &Tensor,
    old_draws: &Draws,
    new_draws: &Draws,
) -> Result<KlEstimate, NetError> {
    let lo = cfm_losses(old, obs, pre, old_draws)?;
    let ln = cfm_losses(new, obs, pre, new_draws)?;
    let mut est = KlEstimate::default();
    let p = lo.len().max(1) as f64;
    for (a, b) in lo.iter().zip(&ln) {
        let (v, c) = k3_from_log(a - b);
        est.kl += v / p;
        est.clamped += c as usize;
        est.old_loss += a / p;
        est.new_loss += b / p;
    }
    Ok(est)
}

/// Mean CFM loss of `current` on the previous iteration's pairs.
pub fn past_cfm_monitor(current: &PolicySnapshot, obs: &Tensor, pre: &Tensor, draws: &Draws) -> Result<f64, NetError> {
    let l = cfm_losses(current, obs, pre, draws)?;
    Ok(l.iter().sum::<f64>() / l.len().max(1) as f64)
}
