//! Dual value networks, TD(lambda) targets and critic regression.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::NamedTensor;
use crate::net::{mlp_forward, AdamW, AdamWConfig, MlpParams, NetError};
use crate::rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Two independently initialized critics with their own optimizers.
#[derive(Clone, Debug)]
pub struct CriticPair {
    pub nets: [MlpParams; 2],
    opts: [AdamW; 2],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct CriticStats {
    /// Mean MSE of both critics over the last epoch.
    pub loss: f64,
    /// Mean squared gap between the two critics on the training states.
    pub gap: f64,
}

impl CriticPair {
    pub fn new(obs_dim: usize, hidden: &[usize], adam: AdamWConfig, rng: &mut impl Rng) -> Result<Self, NetError> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let a = MlpParams::new(&sizes, rng)?;
        let b = MlpParams::new(&sizes, rng)?;
        Ok(Self::from_nets([a, b], adam))
    }

    pub fn from_nets(nets: [MlpParams; 2], adam: AdamWConfig) -> Self {
        let opts = [AdamW::new(&nets[0], adam), AdamW::new(&nets[1], adam)];
        Self { nets, opts }
    }

    /// Averaged prediction for normalized observations, `n x 1`.
    pub fn value(&self, obs: &Tensor) -> Result<Tensor, NetError> {
        let a = self.nets[0].forward(obs)?;
        let b = self.nets[1].forward(obs)?;
        Ok(a.zip_map(&b, |x, y| 0.5 * (x + y)))
    }

    /// Averaged prediction on the tape with the critic weights held constant,
    /// so only the state receives an adjoint.
    pub fn value_on_tape(&self, tape: &Tape, obs: Var) -> Result<Var, NetError> {
        let a = mlp_forward(tape, &self.nets[0].inject(tape, false), obs)?;
        let b = mlp_forward(tape, &self.nets[1].inject(tape, false), obs)?;
        Ok(tape.scale(tape.add(a, b)?, 0.5)?)
    }

    /// Regresses both critics onto `targets` for `epochs` passes of
    /// `minibatches` shuffled minibatches. The permutation of epoch `e` is
    /// drawn from `derive(shuffle_seed, e)`.
    pub fn update(
        &mut self,
        obs: &Tensor,
        targets: &Tensor,
        epochs: usize,
        minibatches: usize,
        lr: f64,
        shuffle_seed: u64,
    ) -> Result<CriticStats, NetError> {
        let n = obs.rows();
        let mb = minibatches.clamp(1, n.max(1));
        let mut last = 0.0;
        for e in 0..epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut r = rng::stream(rng::derive(shuffle_seed, e as u64, 0), rng::streams::CRITIC_SHUFFLE);
            order.shuffle(&mut r);
            let mut total = 0.0;
            for chunk in 0..mb {
                let idx = &order[chunk * n / mb..(chunk + 1) * n / mb];
                if idx.is_empty() {
                    continue;
                }
                let x = obs.select_rows(idx);
                let y = targets.select_rows(idx);
                for (net, opt) in self.nets.iter_mut().zip(self.opts.iter_mut()) {
                    let tape = Tape::new();
                    let vars = net.inject(&tape, true);
                    let pred = mlp_forward(&tape, &vars, tape.constant(x.clone()))?;
                    let resid = tape.sub(pred, tape.constant(y.clone()))?;
                    let loss = tape.mean(tape.square(resid)?)?;
                    total += tape.scalar(loss)? * idx.len() as f64;
                    let g = tape.backward(loss)?;
                    opt.step(net, &vars.grads(&g), lr)?;
                }
            }
            last = total / (2 * n) as f64;
        }
        let a = self.nets[0].forward(obs)?;
        let b = self.nets[1].forward(obs)?;
        let gap = a.zip_map(&b, |x, y| (x - y).powi(2)).mean();
        Ok(CriticStats { loss: last, gap })
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        use crate::net::ParamSet;
        let mut out = Vec::new();
        for (i, (net, opt)) in self.nets.iter().zip(&self.opts).enumerate() {
            out.extend(net.to_named(&format!("critic{i}")));
            out.extend(opt.to_named(&format!("critic{i}.adam"), &net.names()));
        }
        out
    }

    pub fn load_named(&mut self, tensors: &[NamedTensor]) -> Result<(), NetError> {
        use crate::net::ParamSet;
        for (i, (net, opt)) in self.nets.iter_mut().zip(self.opts.iter_mut()).enumerate() {
            net.load_named(&format!("critic{i}"), tensors)?;
            let names = net.names();
            opt.load_named(&format!("critic{i}.adam"), &names, tensors)?;
        }
        Ok(())
    }
}

/// TD(lambda) targets over a segment laid out `H x N` (time by environment).
///
/// `next_values[t]` is `V(s_{t+1})`, the last row being `V(s_H)`. Where
/// `done[t][i]` is set and `bootstrap_at_reset` is false, everything past
/// step `t` is cut: `y_t = r_t`.
pub fn td_lambda_targets(
    rewards: &Tensor,
    next_values: &Tensor,
    done: &[Vec<bool>],
    gamma: f64,
    lambda: f64,
    bootstrap_at_reset: bool,
) -> Tensor {
    let (h, n) = rewards.shape();
    let mut y = Tensor::zeros(h, n);
    for i in 0..n {
        let mut next_y = next_values.get(h - 1, i);
        for t in (0..h).rev() {
            let cont = if done[t][i] && !bootstrap_at_reset { 0.0 } else { 1.0 };
            let v = next_values.get(t, i);
            let yt = rewards.get(t, i) + gamma * cont * ((1.0 - lambda) * v + lambda * next_y);
            y.set(t, i, yt);
            next_y = yt;
        }
    }
    y
}
