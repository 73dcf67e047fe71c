//! The outer training loop, evaluation, metrics and checkpoints.
//!
//! One iteration: roll out `H` steps on a fresh tape, refresh the CFM data,
//! build `-J + c_past L_past + c_uni L_uni`, take one clipped AdamW step on
//! the actor, fit the critics to TD(lambda) targets, then update the
//! observation normalizer. The Gaussian baseline runs the same loop without
//! the CFM terms.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use thiserror::Error;

use crate::cfm::{self, CfmError, Pairs, RecentBuffer, RolloutStates};
use crate::checkpoint::{self, CheckpointError, NamedTensor};
use crate::config::{Algo, ConfigError, TerminalBootstrap, TrainConfig};
use crate::critic::{td_lambda_targets, CriticPair};
use crate::diag::{self, PolicySnapshot};
use crate::env::{BatchedEnv, EnvError, EnvKind, EnvSpec, ObsNormalizer};
use crate::flow::{clamp_pretanh, FlowPolicy};
use crate::net::{AdamW, LrSchedule, NetError, ParamSet};
use crate::rng::{self, streams, RunRng};
use crate::rpg::{self, GaussianPolicy, LossWeights, Policy, RpgError};
use crate::tape::{Tape, TapeError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Rpg(#[from] RpgError),
    #[error(transparent)]
    Cfm(#[from] CfmError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("non-finite value at iteration {iteration}: {detail}")]
    NonFinite { iteration: u64, detail: String },
    #[error("checkpoint does not match the configured policy: {0}")]
    Mismatch(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One metrics row per iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub segment_return: f64,
    pub eval_return: f64,
    pub eval_std: f64,
    pub surrogate: f64,
    pub loss_past: f64,
    pub loss_uni: f64,
    pub policy_loss: f64,
    pub critic_loss: f64,
    pub critic_gap: f64,
    pub grad_norm_pre: f64,
    pub grad_norm_post: f64,
    pub kl: f64,
    pub kl_clamped: u64,
    pub past_cfm: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str = "iteration,segment_return,eval_return,eval_std,surrogate,loss_past,loss_uni,\
policy_loss,critic_loss,critic_gap,grad_norm_pre,grad_norm_post,kl,kl_clamped,past_cfm,actor_lr,critic_lr";

    pub fn floats(&self) -> [f64; 15] {
        [
            self.segment_return,
            self.eval_return,
            self.eval_std,
            self.surrogate,
            self.loss_past,
            self.loss_uni,
            self.policy_loss,
            self.critic_loss,
            self.critic_gap,
            self.grad_norm_pre,
            self.grad_norm_post,
            self.kl,
            self.past_cfm,
            self.actor_lr,
            self.critic_lr,
        ]
    }

    pub fn csv_line(&self) -> String {
        let f = self.floats();
        let mut s = format!("{}", self.iteration);
        for v in &f[..12] {
            let _ = write!(s, ",{v}");
        }
        let _ = write!(s, ",{}", self.kl_clamped);
        for v in &f[12..] {
            let _ = write!(s, ",{v}");
        }
        s
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(MetricsRow::HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Parses a metrics CSV written by [`metrics_csv`] into named columns.
pub fn read_metrics_columns(text: &str) -> Vec<(String, Vec<f64>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap_or("").split(',').map(str::to_string).collect();
    let mut cols: Vec<(String, Vec<f64>)> = header.into_iter().map(|h| (h, Vec::new())).collect();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        for (c, v) in cols.iter_mut().zip(line.split(',')) {
            c.1.push(v.trim().parse().unwrap_or(f64::NAN));
        }
    }
    cols
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

/// Runs `episodes` full episodes in parallel with seeded initial states and
/// seeded noise, the normalizer frozen. Returns undiscounted episode returns.
pub fn evaluate(
    policy: &Policy,
    norm: &ObsNormalizer,
    kind: EnvKind,
    episode_len: usize,
    episodes: usize,
    seed: u64,
) -> Result<EvalResult, TrainError> {
    if episodes == 0 {
        return Ok(EvalResult {
            mean: 0.0,
            std: 0.0,
            returns: Vec::new(),
        });
    }
    let mut env = BatchedEnv::new(EnvSpec::new(kind, episode_len), episodes, seed);
    let mut noise_rng = rng::stream(seed, streams::EVAL);
    let (c, d) = (policy.chunk(), policy.act_dim());
    let mut returns = vec![0.0; episodes];
    let mut actions = Tensor::zeros(0, 0);
    for t in 0..episode_len {
        if t % c == 0 {
            let obs = norm.normalize_values(&env.observations()?);
            let noise = rng::gaussian(&mut noise_rng, episodes, policy.width());
            actions = policy.sample_values(&obs, &noise)?.1;
        }
        let j = t % c;
        let a = crate::tensor::slice_cols(&actions, j * d, (j + 1) * d);
        let tape = Tape::new();
        let s = tape.constant(env.states().clone());
        let tr = env.step(&tape, s, tape.constant(a))?;
        let r = tape.value(tr.reward)?;
        for (i, ret) in returns.iter_mut().enumerate() {
            *ret += r.get(i, 0);
        }
    }
    let n = episodes as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(EvalResult { mean, std, returns })
}

/// Full training state of one run.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    env: BatchedEnv,
    policy: Policy,
    actor_opt: AdamW,
    critics: CriticPair,
    norm: ObsNormalizer,
    buffer: RecentBuffer,
    rollout_states: RolloutStates,
    noise_rng: RunRng,
    cfm_rng: RunRng,
    diag_rng: RunRng,
    iteration: u64,
    last_eval: Option<EvalResult>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let kind = cfg.env;
        let mut init = rng::stream(cfg.seed, streams::INIT);
        let policy = match cfg.algo {
            Algo::Rfo => Policy::Flow(
                FlowPolicy::new(kind.obs_dim(), kind.act_dim(), &cfg.actor_hidden, cfg.flow(), &mut init)
                    .map_err(RpgError::from)?,
            ),
            Algo::ShacGaussian => Policy::Gaussian(GaussianPolicy::new(
                kind.obs_dim(),
                kind.act_dim(),
                &cfg.actor_hidden,
                &mut init,
            )?),
        };
        let critics = CriticPair::new(kind.obs_dim(), &cfg.critic_hidden, cfg.adam(), &mut init)?;
        let actor_opt = AdamW::new(policy.net(), cfg.adam());
        Ok(Self {
            env: BatchedEnv::new(EnvSpec::new(kind, cfg.episode_len), cfg.n_envs, cfg.seed),
            norm: ObsNormalizer::new(kind.obs_dim(), cfg.normalize),
            policy,
            actor_opt,
            critics,
            buffer: RecentBuffer::new(),
            rollout_states: RolloutStates::new(),
            noise_rng: rng::stream(cfg.seed, streams::NOISE),
            cfm_rng: rng::stream(cfg.seed, streams::CFM),
            diag_rng: rng::stream(cfg.seed, streams::DIAG),
            iteration: 0,
            last_eval: None,
            cfg,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn critics(&self) -> &CriticPair {
        &self.critics
    }

    pub fn normalizer(&self) -> &ObsNormalizer {
        &self.norm
    }

    pub fn env(&self) -> &BatchedEnv {
        &self.env
    }

    pub fn buffer(&self) -> &RecentBuffer {
        &self.buffer
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn eval_seed(&self) -> u64 {
        rng::derive(self.cfg.seed, streams::EVAL, 0)
    }

    pub fn evaluate(&self, episodes: usize, seed: u64) -> Result<EvalResult, TrainError> {
        evaluate(
            &self.policy,
            &self.norm,
            self.cfg.env,
            self.cfg.episode_len,
            episodes,
            seed,
        )
    }

    /// Evaluates with the run's fixed evaluation seed and remembers the result
    /// for the metrics column.
    pub fn evaluate_now(&mut self) -> Result<EvalResult, TrainError> {
        let e = self.evaluate(self.cfg.eval_episodes, self.eval_seed())?;
        self.last_eval = Some(e.clone());
        Ok(e)
    }

    fn schedules(&self) -> (LrSchedule, LrSchedule) {
        let total = self.cfg.iterations as u64;
        (
            LrSchedule {
                initial: self.cfg.actor_lr,
                total,
                mode: self.cfg.actor_schedule,
            },
            LrSchedule {
                initial: self.cfg.critic_lr,
                total,
                mode: self.cfg.critic_schedule,
            },
        )
    }

    /// One training iteration.
    pub fn step(&mut self) -> Result<MetricsRow, TrainError> {
        let it = self.iteration;
        let cfg = self.cfg.clone();
        let (h, n) = (cfg.horizon, cfg.n_envs);
        let (actor_sched, critic_sched) = self.schedules();
        let actor_lr = actor_sched.rate(it);
        let critic_lr = critic_sched.rate(it);
        let bootstrap = cfg.terminal_bootstrap == TerminalBootstrap::Value;
        let weights = LossWeights {
            c_past: cfg.c_past,
            c_uni: cfg.c_uni,
        };
        let noise = rpg::draw_noise(&mut self.noise_rng, n, self.policy.width(), h, self.policy.chunk());
        let before = match (&self.policy, cfg.diagnostics) {
            (Policy::Flow(p), true) => Some(PolicySnapshot::capture(&p.net, &p.cfg, &self.norm)),
            _ => None,
        };
        let env_start = self.env.clone();
        let mut row = MetricsRow {
            iteration: it,
            actor_lr,
            critic_lr,
            ..Default::default()
        };
        let mut first_seg = None;
        for epoch in 0..cfg.actor_epochs {
            if epoch > 0 {
                self.env = env_start.clone();
            }
            let tape = Tape::new();
            let vars = self.policy.net().inject(&tape, true);
            let seg = rpg::rollout_segment(
                &tape,
                &self.policy,
                &vars,
                &mut self.env,
                &self.norm,
                h,
                &noise,
                cfg.chunk_executor,
            )?;
            if epoch == 0 && matches!(self.policy, Policy::Flow(_)) {
                let (obs, pre) = seg.sample_pairs();
                let targets = if cfg.tanh_targets {
                    pre.map(f64::tanh)
                } else {
                    clamp_pretanh(&pre, cfg.clamp)
                };
                self.buffer.push(Pairs::new(obs, targets)?);
                self.rollout_states.replace(seg.stacked_obs());
            }
            let j = rpg::surrogate(&tape, &seg, &self.critics, &self.norm, cfg.gamma, bootstrap)?;
            let (past, uni) = if matches!(self.policy, Policy::Flow(_)) {
                let batch = cfg.cfm_batch_size();
                let p = cfm::cfm_loss_past(&tape, &vars, &self.buffer, batch, &self.norm, &mut self.cfm_rng)?;
                let u = cfm::cfm_loss_uniform(
                    &tape,
                    &vars,
                    &self.rollout_states,
                    self.policy.width(),
                    batch,
                    cfg.clamp,
                    cfg.tanh_targets,
                    &self.norm,
                    &mut self.cfm_rng,
                )?;
                (Some(p), Some(u))
            } else {
                (None, None)
            };
            let loss = rpg::policy_loss(&tape, j, past, uni, weights)?;
            let jv = tape.scalar(j)?;
            let pv = past.map(|p| tape.scalar(p)).transpose()?.unwrap_or(0.0);
            let uv = uni.map(|u| tape.scalar(u)).transpose()?.unwrap_or(0.0);
            let lv = tape.scalar(loss)?;
            if ![jv, pv, uv, lv].iter().all(|v| v.is_finite()) {
                return Err(TrainError::NonFinite {
                    iteration: it,
                    detail: format!(
                        "surrogate={jv} loss_past={pv} loss_uni={uv} policy_loss={lv} segment_return={}",
                        seg.mean_return()
                    ),
                });
            }
            let grads = vars.grads(&tape.backward(loss)?);
            let (pre, post) = rpg::actor_update(
                self.policy.net_mut(),
                &mut self.actor_opt,
                grads,
                cfg.clip_norm,
                actor_lr,
                it,
            )?;
            if epoch == 0 {
                row.surrogate = jv;
                row.loss_past = pv;
                row.loss_uni = uv;
                row.policy_loss = lv;
                row.grad_norm_pre = pre;
                row.grad_norm_post = post;
                row.segment_return = seg.mean_return();
                first_seg = Some(seg);
            }
        }
        let seg = first_seg.expect("at least one actor epoch");

        // critics: TD(lambda) targets from the pre-update critics
        let obs = self.norm.normalize_values(&seg.stacked_obs());
        let next = self
            .critics
            .value(&self.norm.normalize_values(&seg.stacked_next_obs()))?;
        let next = Tensor::from_vec(h, n, next.into_vec());
        let y = td_lambda_targets(&seg.reward_values, &next, &seg.done, cfg.gamma, cfg.lambda, bootstrap);
        let y = Tensor::from_vec(h * n, 1, y.into_vec());
        let shuffle = rng::derive(cfg.seed, streams::CRITIC_SHUFFLE, it);
        let stats = self
            .critics
            .update(&obs, &y, cfg.critic_epochs, cfg.critic_minibatches, critic_lr, shuffle)?;
        row.critic_loss = stats.loss;
        row.critic_gap = stats.gap;

        self.norm.update(&seg.stacked_obs());

        if let (Some(old), Policy::Flow(p)) = (before, &self.policy) {
            let new = PolicySnapshot::capture(&p.net, &p.cfg, &self.norm);
            let (obs, pre) = seg.sample_pairs();
            let count = cfg.kl_pairs.min(obs.rows());
            let mut idx = index::sample(&mut self.diag_rng, obs.rows(), count).into_vec();
            idx.sort_unstable();
            let (obs, pre) = (obs.select_rows(&idx), pre.select_rows(&idx));
            let d_old = diag::draw(&mut self.diag_rng, count, cfg.kl_draws, pre.cols());
            let d_new = if cfg.crn {
                d_old.clone()
            } else {
                diag::draw(&mut self.diag_rng, count, cfg.kl_draws, pre.cols())
            };
            let est = diag::kl_estimate(&old, &new, &obs, &pre, &d_old, &d_new)?;
            row.kl = est.kl;
            row.kl_clamped = est.clamped as u64;
            row.past_cfm = est.new_loss;
        }

        self.iteration += 1;
        let done = self.iteration as usize;
        let due = cfg.eval_interval > 0 && done.is_multiple_of(cfg.eval_interval);
        if due || done == cfg.iterations || self.last_eval.is_none() {
            self.evaluate_now()?;
        }
        let e = self.last_eval.as_ref().expect("evaluated above");
        row.eval_return = e.mean;
        row.eval_std = e.std;
        if let Some(bad) = row.floats().iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite {
                iteration: it,
                detail: format!("metrics column {bad} is not finite: {}", row.csv_line()),
            });
        }
        Ok(row)
    }

    pub fn checkpoint(&self) -> Vec<NamedTensor> {
        let net = self.policy.net();
        let mut out = vec![NamedTensor::scalar("meta.iteration", self.iteration as f64)];
        out.extend(net.to_named("actor"));
        out.extend(self.actor_opt.to_named("actor.adam", &net.names()));
        out.extend(self.critics.to_named());
        out.push(NamedTensor::vector("norm.mean", self.norm.mean()));
        out.push(NamedTensor::vector("norm.var", self.norm.var()));
        out.push(NamedTensor::scalar("norm.count", self.norm.count()));
        out
    }

    /// Restores network, optimizer and normalizer state.
    pub fn load_checkpoint(&mut self, tensors: &[NamedTensor]) -> Result<(), TrainError> {
        let names = self.policy.net().names();
        self.policy.net_mut().load_named("actor", tensors)?;
        self.actor_opt.load_named("actor.adam", &names, tensors)?;
        self.critics.load_named(tensors)?;
        let mean = checkpoint::find(tensors, "norm.mean")?.data.clone();
        let var = checkpoint::find(tensors, "norm.var")?.data.clone();
        if mean.len() != self.norm.mean().len() || var.len() != mean.len() {
            return Err(TrainError::Mismatch("normalizer width".into()));
        }
        let count = checkpoint::find(tensors, "norm.count")?.data[0];
        self.norm = ObsNormalizer::from_parts(self.cfg.normalize, mean, var, count);
        self.iteration = checkpoint::find(tensors, "meta.iteration")?.data[0] as u64;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let f = fs::File::create(path).map_err(io_err(path))?;
        checkpoint::write_checkpoint(std::io::BufWriter::new(f), &self.checkpoint())?;
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<(), TrainError> {
        let f = fs::File::open(path).map_err(io_err(path))?;
        let t = checkpoint::read_checkpoint(std::io::BufReader::new(f))?;
        self.load_checkpoint(&t)
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub metrics: Vec<MetricsRow>,
    pub initial_eval: EvalResult,
    pub final_eval: EvalResult,
    pub seconds: Vec<f64>,
    pub trainer: Trainer,
}

impl RunOutput {
    pub fn csv(&self) -> String {
        metrics_csv(&self.metrics)
    }
}

struct Clock {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Clock {
    fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    fn seconds(&self) -> f64 {
        #[cfg(not(target_arch = "wasm32"))]
        return self.start.elapsed().as_secs_f64();
        #[cfg(target_arch = "wasm32")]
        return 0.0;
    }
}

/// Trains for `cfg.iterations`. With `out`, writes `metrics.csv`,
/// `timing.csv`, `config.cfg` and checkpoints under it.
pub fn train(cfg: &TrainConfig, out: Option<&Path>) -> Result<RunOutput, TrainError> {
    let mut trainer = Trainer::new(cfg.clone())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let p = dir.join("config.cfg");
        fs::write(&p, cfg.to_text()).map_err(io_err(&p))?;
    }
    let initial_eval = trainer.evaluate_now()?;
    let clock = Clock::start();
    let mut metrics = Vec::with_capacity(cfg.iterations);
    let mut seconds = Vec::with_capacity(cfg.iterations);
    let write_logs = |metrics: &[MetricsRow], seconds: &[f64]| -> Result<(), TrainError> {
        if let Some(dir) = out {
            let p = dir.join("metrics.csv");
            fs::write(&p, metrics_csv(metrics)).map_err(io_err(&p))?;
            let mut t = String::from("iteration,seconds\n");
            for (i, s) in seconds.iter().enumerate() {
                let _ = writeln!(t, "{i},{s:.6}");
            }
            let p = dir.join("timing.csv");
            fs::write(&p, t).map_err(io_err(&p))?;
        }
        Ok(())
    };
    for _ in 0..cfg.iterations {
        let row = match trainer.step() {
            Ok(r) => r,
            Err(e) => {
                write_logs(&metrics, &seconds)?;
                if let Some(dir) = out {
                    let p = dir.join("failure.txt");
                    fs::write(&p, format!("{e}\n")).map_err(io_err(&p))?;
                    trainer.save(&dir.join("checkpoints").join("failure.rfo"))?;
                }
                return Err(e);
            }
        };
        metrics.push(row);
        seconds.push(clock.seconds());
        let done = trainer.iteration() as usize;
        if let Some(dir) = out {
            if cfg.checkpoint_interval > 0 && done.is_multiple_of(cfg.checkpoint_interval) {
                trainer.save(&dir.join("checkpoints").join(format!("iter_{done:06}.rfo")))?;
            }
        }
    }
    let final_eval = trainer.last_eval.clone().unwrap_or_else(|| initial_eval.clone());
    write_logs(&metrics, &seconds)?;
    if let Some(dir) = out {
        trainer.save(&dir.join("checkpoints").join("final.rfo"))?;
    }
    Ok(RunOutput {
        metrics,
        initial_eval,
        final_eval,
        seconds,
        trainer,
    })
}

/// [`train`] with the Gaussian policy head.
pub fn train_shac_gaussian(cfg: &TrainConfig, out: Option<&Path>) -> Result<RunOutput, TrainError> {
    let mut c = cfg.clone();
    c.algo = Algo::ShacGaussian;
    train(&c, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            n_envs: 4,
            horizon: 8,
            iterations: 3,
            eval_episodes: 8,
            eval_interval: 2,
            actor_hidden: vec![16, 16],
            critic_hidden: vec![16, 16],
            critic_epochs: 2,
            ..Default::default()
        }
    }

    #[test]
    fn zero_iterations_only_evaluates() {
        let cfg = TrainConfig {
            iterations: 0,
            ..small()
        };
        let out = train(&cfg, None).unwrap();
        assert!(out.metrics.is_empty());
        assert_eq!(out.final_eval, out.initial_eval);
        assert_eq!(out.csv(), format!("{}\n", MetricsRow::HEADER));
    }

    #[test]
    fn runs_are_deterministic() {
        let a = train(&small(), None).unwrap();
        let b = train(&small(), None).unwrap();
        assert_eq!(a.csv(), b.csv());
        let mut other = small();
        other.seed = 1;
        assert_ne!(train(&other, None).unwrap().csv(), a.csv());
    }

    #[test]
    fn metrics_columns_are_complete() {
        let mut cfg = small();
        cfg.diagnostics = true;
        cfg.kl_pairs = 8;
        cfg.kl_draws = 16;
        let out = train(&cfg, None).unwrap();
        assert_eq!(out.metrics.len(), 3);
        for r in &out.metrics {
            assert!(r.floats().iter().all(|v| v.is_finite()));
            assert!(r.kl >= 0.0 && r.past_cfm > 0.0);
        }
        let cols = read_metrics_columns(&out.csv());
        assert_eq!(cols.len(), MetricsRow::HEADER.split(',').count());
        assert!(cols.iter().all(|(_, v)| v.len() == 3));
        // the buffer holds the last two iterations
        let b = out.trainer.buffer();
        assert_eq!(b.len(), 2 * 4 * 8);
    }

    #[test]
    fn diagnostics_do_not_change_training() {
        let plain = train(&small(), None).unwrap();
        let mut cfg = small();
        cfg.diagnostics = true;
        cfg.kl_pairs = 4;
        cfg.kl_draws = 8;
        let with = train(&cfg, None).unwrap();
        for (a, b) in plain.metrics.iter().zip(&with.metrics) {
            let mut b = *b;
            b.kl = 0.0;
            b.kl_clamped = 0;
            b.past_cfm = 0.0;
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn gaussian_baseline_trains() {
        let out = train_shac_gaussian(&small(), None).unwrap();
        assert_eq!(out.trainer.config().algo, Algo::ShacGaussian);
        assert!(out.metrics.iter().all(|r| r.loss_past == 0.0 && r.loss_uni == 0.0));
        assert_eq!(out.csv(), train_shac_gaussian(&small(), None).unwrap().csv());
    }

    #[test]
    fn zero_reward_env_evaluates_to_zero() {
        let mut r = rng::stream(0, 0);
        let p = Policy::Flow(FlowPolicy::new(4, 2, &[8], Default::default(), &mut r).unwrap());
        let e = evaluate(&p, &ObsNormalizer::new(4, true), EnvKind::PointMassFree, 20, 16, 3).unwrap();
        assert_eq!((e.mean, e.std), (0.0, 0.0));
        let a = evaluate(&p, &ObsNormalizer::new(4, true), EnvKind::PointMass, 20, 16, 3).unwrap();
        let b = evaluate(&p, &ObsNormalizer::new(4, true), EnvKind::PointMass, 20, 16, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.returns.len(), 16);
        assert!(a.std > 0.0);
    }

    #[test]
    fn files_and_checkpoints_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.checkpoint_interval = 2;
        let out = train(&cfg, Some(dir.path())).unwrap();
        let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(csv, out.csv());
        assert!(dir.path().join("timing.csv").exists());
        assert!(dir.path().join("checkpoints/iter_000002.rfo").exists());
        let resolved = fs::read_to_string(dir.path().join("config.cfg")).unwrap();
        assert_eq!(TrainConfig::from_text(&resolved).unwrap(), cfg);
        let mut fresh = Trainer::new(cfg.clone()).unwrap();
        fresh.load(&dir.path().join("checkpoints/final.rfo")).unwrap();
        assert_eq!(fresh.policy(), out.trainer.policy());
        assert_eq!(fresh.normalizer(), out.trainer.normalizer());
        assert_eq!(fresh.iteration(), 3);
        let e = fresh.evaluate(cfg.eval_episodes, out.trainer.eval_seed()).unwrap();
        assert_eq!(e, out.final_eval);
    }

    #[test]
    fn regularizer_weights_only_scale_their_terms() {
        // c = 0 keeps the CFM losses in the log but removes them from the update
        let mut a = small();
        a.c_past = 0.0;
        a.c_uni = 0.0;
        let out = train(&a, None).unwrap();
        for r in &out.metrics {
            assert!(r.loss_past > 0.0);
            assert!((r.policy_loss + r.surrogate).abs() < 1e-12);
        }
    }
}
