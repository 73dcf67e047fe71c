//! Feed-forward networks, AdamW, learning-rate schedules and gradient clipping.
//!
//! Hidden layers are `linear -> LayerNorm -> SiLU`; the output layer is plain
//! linear. Squashing and clamping belong to callers.

use rand::Rng;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, NamedTensor};
use crate::rng::gaussian;
use crate::tape::{Gradients, Tape, TapeError, Var};
use crate::tensor::{self, Broadcast, Tensor};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input width {got} does not match network input width {expected}")]
    Width { expected: usize, got: usize },
    #[error("network needs at least an input and an output width")]
    TooShallow,
    #[error("non-finite gradient in parameter block {0}")]
    NonFiniteGrad(String),
    #[error("gradient list has {got} blocks, parameters have {expected}")]
    GradCount { expected: usize, got: usize },
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Anything the optimizer can update.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
    fn names(&self) -> Vec<String>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    sizes: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    ln_gamma: Vec<Tensor>,
    ln_beta: Vec<Tensor>,
}

/// Matrix with orthonormal rows or columns (whichever is shorter), scaled by `gain`.
pub fn orthogonal(rng: &mut impl Rng, rows: usize, cols: usize, gain: f64) -> Tensor {
    let tall = rows >= cols;
    let (n, k) = if tall { (rows, cols) } else { (cols, rows) };
    // k column vectors of length n, Gram-Schmidt'ed
    let g = gaussian(rng, k, n);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    for i in 0..k {
        let mut v = g.row_slice(i).to_vec();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(a, c)| a * c).sum();
                for (a, c) in v.iter_mut().zip(b) {
                    *a -= d * c;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for a in &mut v {
            *a /= norm;
        }
        basis.push(v);
    }
    let mut out = Tensor::zeros(rows, cols);
    for (j, b) in basis.iter().enumerate() {
        for (i, &val) in b.iter().enumerate() {
            if tall {
                out.set(i, j, gain * val);
            } else {
                out.set(j, i, gain * val);
            }
        }
    }
    out
}

impl MlpParams {
    /// Orthogonal weights (gain 1), zero biases, LayerNorm scale 1 and shift 0.
    pub fn new(sizes: &[usize], rng: &mut impl Rng) -> Result<Self, NetError> {
        let mut p = Self::zeros(sizes)?;
        for (i, w) in p.weights.iter_mut().enumerate() {
            *w = orthogonal(rng, sizes[i], sizes[i + 1], 1.0);
        }
        Ok(p)
    }

    /// All weights and biases zero; LayerNorm scale 1.
    pub fn zeros(sizes: &[usize]) -> Result<Self, NetError> {
        if sizes.len() < 2 {
            return Err(NetError::TooShallow);
        }
        let layers = sizes.len() - 1;
        Ok(Self {
            sizes: sizes.to_vec(),
            weights: (0..layers).map(|i| Tensor::zeros(sizes[i], sizes[i + 1])).collect(),
            biases: (0..layers).map(|i| Tensor::zeros(1, sizes[i + 1])).collect(),
            ln_gamma: (0..layers - 1).map(|i| Tensor::filled(1, sizes[i + 1], 1.0)).collect(),
            ln_beta: (0..layers - 1).map(|i| Tensor::zeros(1, sizes[i + 1])).collect(),
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_width(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.weights[layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.biases[layer]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Places the parameters on `tape`, trainable or constant.
    pub fn inject(&self, tape: &Tape, trainable: bool) -> MlpVars {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        MlpVars {
            sizes: self.sizes.clone(),
            weights: self.weights.iter().map(leaf).collect(),
            biases: self.biases.iter().map(leaf).collect(),
            ln_gamma: self.ln_gamma.iter().map(leaf).collect(),
            ln_beta: self.ln_beta.iter().map(leaf).collect(),
        }
    }

    /// Tape-free forward pass; bit-identical to [`mlp_forward`].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, NetError> {
        if x.cols() != self.input_width() {
            return Err(NetError::Width {
                expected: self.input_width(),
                got: x.cols(),
            });
        }
        let mut h = x.clone();
        let last = self.layers() - 1;
        for i in 0..self.layers() {
            let z = tensor::gemm(&h, false, &self.weights[i], false);
            let z = tensor::broadcast_apply(&z, &self.biases[i], Broadcast::Row, |a, b| a + b);
            h = if i < last {
                let (n, _, _) = tensor::layer_norm(&z, &self.ln_gamma[i], &self.ln_beta[i]);
                n.map(tensor::silu)
            } else {
                z
            };
        }
        Ok(h)
    }

    pub fn to_named(&self, prefix: &str) -> Vec<NamedTensor> {
        self.names()
            .into_iter()
            .zip(self.tensors())
            .map(|(n, t)| NamedTensor::matrix(format!("{prefix}.{n}"), t))
            .collect()
    }

    /// Overwrites parameters from named tensors written by [`Self::to_named`].
    pub fn load_named(&mut self, prefix: &str, tensors: &[NamedTensor]) -> Result<(), NetError> {
        let names = self.names();
        for (name, slot) in names.into_iter().zip(self.tensors_mut()) {
            let full = format!("{prefix}.{name}");
            let t = checkpoint::find(tensors, &full)?.to_matrix()?;
            if t.shape() != slot.shape() {
                return Err(CheckpointError::Shape {
                    name: full,
                    expected: vec![slot.rows(), slot.cols()],
                    found: vec![t.rows(), t.cols()],
                }
                .into());
            }
            *slot = t;
        }
        Ok(())
    }
}

impl ParamSet for MlpParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for i in 0..self.layers() {
            out.push(&self.weights[i]);
            out.push(&self.biases[i]);
            if i < self.ln_gamma.len() {
                out.push(&self.ln_gamma[i]);
                out.push(&self.ln_beta[i]);
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let hidden = self.ln_gamma.len();
        let mut g = self.ln_gamma.iter_mut();
        let mut b = self.ln_beta.iter_mut();
        for (i, (w, bias)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push(w);
            out.push(bias);
            if i < hidden {
                out.push(g.next().unwrap());
                out.push(b.next().unwrap());
            }
        }
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.layers() {
            out.push(format!("l{i}.weight"));
            out.push(format!("l{i}.bias"));
            if i < self.ln_gamma.len() {
                out.push(format!("l{i}.ln_scale"));
                out.push(format!("l{i}.ln_shift"));
            }
        }
        out
    }
}

/// MLP parameters living on a tape, in [`ParamSet::tensors`] order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    sizes: Vec<usize>,
    weights: Vec<Var>,
    biases: Vec<Var>,
    ln_gamma: Vec<Var>,
    ln_beta: Vec<Var>,
}

impl MlpVars {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for i in 0..self.weights.len() {
            out.push(self.weights[i]);
            out.push(self.biases[i]);
            if i < self.ln_gamma.len() {
                out.push(self.ln_gamma[i]);
                out.push(self.ln_beta[i]);
            }
        }
        out
    }

    /// Rebuilds from a flat list in [`ParamSet::tensors`] order.
    pub fn from_vars(sizes: &[usize], vars: Vec<Var>) -> Self {
        let layers = sizes.len() - 1;
        let mut it = vars.into_iter();
        let mut out = MlpVars {
            sizes: sizes.to_vec(),
            weights: Vec::new(),
            biases: Vec::new(),
            ln_gamma: Vec::new(),
            ln_beta: Vec::new(),
        };
        for i in 0..layers {
            out.weights.push(it.next().expect("too few vars"));
            out.biases.push(it.next().expect("too few vars"));
            if i + 1 < layers {
                out.ln_gamma.push(it.next().expect("too few vars"));
                out.ln_beta.push(it.next().expect("too few vars"));
            }
        }
        out
    }

    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars().into_iter().map(|v| g.get(v)).collect()
    }

    pub fn input_width(&self) -> usize {
        self.sizes[0]
    }
}

/// Batched forward pass on the tape; `x` is `batch x input_width`.
pub fn mlp_forward(tape: &Tape, params: &MlpVars, x: Var) -> Result<Var, NetError> {
    if x.cols() != params.input_width() {
        return Err(NetError::Width {
            expected: params.input_width(),
            got: x.cols(),
        });
    }
    let last = params.weights.len() - 1;
    let mut h = x;
    for i in 0..params.weights.len() {
        let z = tape.matmul(h, params.weights[i])?;
        let z = tape.add(z, params.biases[i])?;
        h = if i < last {
            let n = tape.layer_norm(z, params.ln_gamma[i], params.ln_beta[i])?;
            tape.silu(n)?
        } else {
            z
        };
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &impl ParamSet, cfg: AdamWConfig) -> Self {
        let zeros = |t: &&Tensor| Tensor::zeros(t.rows(), t.cols());
        let ts = params.tensors();
        Self {
            cfg,
            m: ts.iter().map(zeros).collect(),
            v: ts.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// One update at learning rate `lr`. Rejects non-finite gradients before
    /// touching any state.
    pub fn step(&mut self, params: &mut impl ParamSet, grads: &[Tensor], lr: f64) -> Result<(), NetError> {
        let names = params.names();
        if grads.len() != names.len() {
            return Err(NetError::GradCount {
                expected: names.len(),
                got: grads.len(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.all_finite()) {
            return Err(NetError::NonFiniteGrad(names[i].clone()));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                pd[i] *= 1.0 - lr * weight_decay;
                pd[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn to_named(&self, prefix: &str, names: &[String]) -> Vec<NamedTensor> {
        let mut out = vec![NamedTensor::scalar(format!("{prefix}.step"), self.step as f64)];
        for (i, n) in names.iter().enumerate() {
            out.push(NamedTensor::matrix(format!("{prefix}.m.{n}"), &self.m[i]));
            out.push(NamedTensor::matrix(format!("{prefix}.v.{n}"), &self.v[i]));
        }
        out
    }

    pub fn load_named(&mut self, prefix: &str, names: &[String], tensors: &[NamedTensor]) -> Result<(), NetError> {
        self.step = checkpoint::find(tensors, &format!("{prefix}.step"))?.data[0] as u64;
        for (i, n) in names.iter().enumerate() {
            self.m[i] = checkpoint::find(tensors, &format!("{prefix}.m.{n}"))?.to_matrix()?;
            self.v[i] = checkpoint::find(tensors, &format!("{prefix}.v.{n}"))?.to_matrix()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleMode {
    Linear,
    Constant,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub total: u64,
    pub mode: ScheduleMode,
}

impl LrSchedule {
    /// `initial * (1 - t/T)` floored at 0 in linear mode, `initial` otherwise.
    pub fn rate(&self, t: u64) -> f64 {
        match self.mode {
            ScheduleMode::Constant => self.initial,
            ScheduleMode::Linear => {
                if self.total == 0 {
                    return 0.0;
                }
                (self.initial * (1.0 - t as f64 / self.total as f64)).max(0.0)
            }
        }
    }
}

/// Global L2 norm of a gradient list.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`.
/// Returns `(norm_before, norm_after)`.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> (f64, f64) {
    let pre = global_norm(grads);
    if pre > max_norm && pre > 0.0 {
        let s = max_norm / pre;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    (pre, global_norm(grads))
}
