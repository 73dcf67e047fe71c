//! Browser bindings: incremental training, flow sample paths and the action
//! histogram of the current policy.

use thiserror::Error;
use wasm_bindgen::prelude::*;

use rfo::config::{ConfigError, TrainConfig};
use rfo::env::{EnvError, EnvKind};
use rfo::flow::{self, FlowError};
use rfo::rng;
use rfo::rpg::{Policy, RpgError};
use rfo::tape::{Tape, TapeError};
use rfo::tensor::Tensor;
use rfo::trainer::{TrainError, Trainer};

#[derive(Debug, Error)]
pub enum DemoError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Rpg(#[from] RpgError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("state has {got} entries, the environment needs {expected}")]
    State { expected: usize, got: usize },
}

fn js(e: DemoError) -> JsError {
    JsError::new(&e.to_string())
}

/// One training run held in the page.
#[wasm_bindgen]
pub struct Demo {
    trainer: Trainer,
    returns: Vec<f64>,
    evals: Vec<f64>,
}

impl Demo {
    pub fn create(env: &str, flow_steps: usize, c_past: f64, c_uni: f64, seed: u32) -> Result<Self, DemoError> {
        let mut cfg = TrainConfig {
            n_envs: 16,
            eval_episodes: 32,
            eval_interval: 10,
            iterations: 300,
            critic_epochs: 8,
            actor_hidden: vec![32, 32],
            critic_hidden: vec![32, 32],
            c_past,
            c_uni,
            seed: u64::from(seed),
            ..Default::default()
        };
        cfg.set("env", env)?;
        cfg.set("flow_steps", &flow_steps.to_string())?;
        cfg.validate()?;
        Ok(Self {
            trainer: Trainer::new(cfg)?,
            returns: Vec::new(),
            evals: Vec::new(),
        })
    }

    pub fn run(&mut self, iterations: usize) -> Result<(), DemoError> {
        for _ in 0..iterations {
            let row = self.trainer.step()?;
            self.returns.push(row.segment_return);
            self.evals.push(row.eval_return);
        }
        Ok(())
    }

    fn kind(&self) -> EnvKind {
        self.trainer.config().env
    }

    /// Euler states of `samples` draws at one physical state, laid out
    /// sample-major: `samples x (K + 1) x act_dim`, squashed by tanh.
    pub fn paths(&self, state: &[f64], samples: usize, seed: u32) -> Result<Vec<f64>, DemoError> {
        let kind = self.kind();
        if state.len() != kind.state_dim() {
            return Err(DemoError::State {
                expected: kind.state_dim(),
                got: state.len(),
            });
        }
        let Policy::Flow(p) = self.trainer.policy() else {
            unreachable!("the demo always trains a flow policy")
        };
        let s = Tensor::from_vec(samples, state.len(), state.repeat(samples));
        let obs = self.trainer.normalizer().normalize_values(&kind.observe_values(&s)?);
        let noise = rng::gaussian(
            &mut rng::stream(u64::from(seed), rng::streams::EVAL),
            samples,
            p.width(),
        );
        let tape = Tape::new();
        let vars = p.net.inject(&tape, false);
        let sample = flow::sample_action(&tape, &vars, &p.cfg, tape.constant(obs), tape.constant(noise))?;
        let steps: Vec<Tensor> = sample
            .states
            .iter()
            .map(|v| tape.value(*v).map(|t| t.map(f64::tanh)))
            .collect::<Result<_, _>>()?;
        let d = p.width();
        let mut out = Vec::with_capacity(samples * steps.len() * d);
        for i in 0..samples {
            for t in &steps {
                out.extend_from_slice(&t.row_slice(i)[..d]);
            }
        }
        Ok(out)
    }

    /// Histogram over `[-1, 1]` of each action coordinate at states drawn
    /// from the initial distribution, `act_dim x bins`, as fractions.
    pub fn histogram(&self, bins: usize, samples: usize, seed: u32) -> Result<Vec<f64>, DemoError> {
        let kind = self.kind();
        let policy = self.trainer.policy();
        let seed = u64::from(seed);
        let states = kind.initial_states(samples, &mut rng::stream(seed, rng::streams::ENV_RESET));
        let obs = self
            .trainer
            .normalizer()
            .normalize_values(&kind.observe_values(&states)?);
        let noise = rng::gaussian(&mut rng::stream(seed, rng::streams::EVAL), samples, policy.width());
        let (_, actions) = policy.sample_values(&obs, &noise)?;
        let d = kind.act_dim();
        let bins = bins.max(1);
        let mut out = vec![0.0; d * bins];
        for i in 0..samples {
            for c in 0..d {
                let a = actions.get(i, c);
                let b = (((a + 1.0) / 2.0 * bins as f64) as usize).min(bins - 1);
                out[c * bins + b] += 1.0 / samples as f64;
            }
        }
        Ok(out)
    }
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(env: &str, flow_steps: usize, c_past: f64, c_uni: f64, seed: u32) -> Result<Demo, JsError> {
        Self::create(env, flow_steps, c_past, c_uni, seed).map_err(js)
    }

    /// Runs `iterations` training iterations.
    pub fn train(&mut self, iterations: usize) -> Result<(), JsError> {
        self.run(iterations).map_err(js)
    }

    pub fn iteration(&self) -> u32 {
        self.trainer.iteration() as u32
    }

    #[wasm_bindgen(js_name = segmentReturns)]
    pub fn segment_returns(&self) -> Vec<f64> {
        self.returns.clone()
    }

    #[wasm_bindgen(js_name = evalReturns)]
    pub fn eval_returns(&self) -> Vec<f64> {
        self.evals.clone()
    }

    #[wasm_bindgen(js_name = actDim)]
    pub fn act_dim(&self) -> usize {
        self.kind().act_dim()
    }

    #[wasm_bindgen(js_name = flowSteps)]
    pub fn flow_steps(&self) -> usize {
        self.trainer.config().flow_steps
    }

    #[wasm_bindgen(js_name = flowPaths)]
    pub fn flow_paths(&self, state: &[f64], samples: usize, seed: u32) -> Result<Vec<f64>, JsError> {
        self.paths(state, samples, seed).map_err(js)
    }

    #[wasm_bindgen(js_name = actionHistogram)]
    pub fn action_histogram(&self, bins: usize, samples: usize, seed: u32) -> Result<Vec<f64>, JsError> {
        self.histogram(bins, samples, seed).map_err(js)
    }
}
