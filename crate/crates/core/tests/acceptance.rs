//! Acceptance run: every criterion at its stated tolerance, one line each.
//!
//! `cargo test -p rfo-core --test acceptance -- 2 3` runs a subset.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rfo::cfm::ks_uniform;
use rfo::config::{Algo, TrainConfig};
use rfo::critic::td_lambda_targets;
use rfo::diag::{self, PolicySnapshot};
use rfo::env::{BatchedEnv, EnvKind, EnvSpec, ObsNormalizer};
use rfo::flow::{self, FlowConfig};
use rfo::gradcheck::SurrogateCase;
use rfo::net::MlpParams;
use rfo::rng;
use rfo::rpg::Policy;
use rfo::tape::Tape;
use rfo::tensor::Tensor;
use rfo::trainer::{self, MetricsRow, RunOutput};

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Finished runs shared between criteria, keyed by the resolved config.
struct Runs {
    root: PathBuf,
    done: HashMap<String, Summary>,
}

#[derive(Clone)]
struct Summary {
    final_return: f64,
    metrics: Vec<MetricsRow>,
    dir: PathBuf,
    policy: Policy,
    norm: ObsNormalizer,
}

impl Runs {
    fn get(&mut self, cfg: &TrainConfig) -> Summary {
        let key = cfg.to_text();
        if let Some(s) = self.done.get(&key) {
            return s.clone();
        }
        let dir = self.root.join(format!("run_{:03}", self.done.len()));
        let out: RunOutput = trainer::train(cfg, Some(&dir)).unwrap_or_else(|e| panic!("training failed: {e}"));
        let s = Summary {
            final_return: out.final_eval.mean,
            metrics: out.metrics,
            dir,
            policy: out.trainer.policy().clone(),
            norm: out.trainer.normalizer().clone(),
        };
        self.done.insert(key, s.clone());
        s
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// `x` is within `frac` of `best` in the direction of worse returns.
fn within(x: f64, best: f64, frac: f64) -> bool {
    x >= best - frac * best.abs()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let case = SurrogateCase::new(0, false).expect("setup");
    let (n, err) = case.check(20, &mut rng::stream(0, 99)).expect("gradient check");
    let secs = start.elapsed().as_secs_f64();
    outcome(
        n == 20 && err < 1e-3 && secs < 60.0,
        format!("max relative error {err:.2e} over {n} actor parameters, {secs:.1} s"),
    )
}

fn criterion_2() -> Outcome {
    let (obs_dim, d) = (3, 2);
    let mut r = rng::stream(2, 0);
    let rows = 256;
    let obs = rng::gaussian(&mut r, rows, obs_dim);
    let noise = rng::gaussian(&mut r, rows, d);
    let c = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
    let mut failures = Vec::new();
    for k in [1, 2, 4, 8] {
        let cfg = FlowConfig {
            steps: k,
            ..Default::default()
        };
        let sizes = flow::FlowPolicy::sizes(obs_dim, d, &[16, 16], &cfg);
        let zero = MlpParams::zeros(&sizes).unwrap();
        let mut constant = zero.clone();
        let last = constant.layers() - 1;
        *constant.bias_mut(last) = Tensor::from_vec(1, d, c.to_vec());

        let (pre0, a0) = flow::sample_action_values(&zero, &cfg, &obs, &noise).unwrap();
        let want_pre: Vec<f64> = noise.data().iter().enumerate().map(|(i, e)| e + c[i % d]).collect();
        let (pre_c, _) = flow::sample_action_values(&constant, &cfg, &obs, &noise).unwrap();

        let tape = Tape::new();
        let vars = constant.inject(&tape, false);
        let s = flow::sample_action(
            &tape,
            &vars,
            &cfg,
            tape.constant(obs.clone()),
            tape.constant(noise.clone()),
        )
        .unwrap();
        let tape_pre = tape.value(s.pre).unwrap();

        if pre0 != noise || a0 != noise.map(f64::tanh) {
            failures.push(format!("K={k} zero field"));
        }
        if pre_c.data() != want_pre.as_slice() || tape_pre.data() != want_pre.as_slice() {
            failures.push(format!("K={k} constant field"));
        }
    }
    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "zero field gives tanh(eps) and constant field gives eps + c bit-exactly for K in {1,2,4,8}".into()
        } else {
            format!("mismatch: {}", failures.join(", "))
        },
    )
}

/// Geometric mixture of explicit n-step returns.
fn lambda_mixture(r: &[f64], v_next: &[f64], done: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let h = r.len();
    (0..h)
        .map(|t| {
            let n_step = |n: usize| {
                let mut g = 0.0;
                let mut disc = 1.0;
                for k in 0..n {
                    g += disc * r[t + k];
                    if done[t + k] {
                        return g;
                    }
                    disc *= gamma;
                }
                g + disc * v_next[t + n - 1]
            };
            let m = h - t;
            let mut total = 0.0;
            let mut weight = 1.0 - lambda;
            for n in 1..m {
                total += weight * n_step(n);
                weight *= lambda;
            }
            total + lambda.powi(m as i32 - 1) * n_step(m)
        })
        .collect()
}

fn criterion_3() -> Outcome {
    let mut r = rng::stream(3, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let h = r.random_range(1..=8);
        let n = r.random_range(1..=4);
        let gamma = r.random_range(0.5..1.0);
        let lambda = r.random_range(0.0..1.0);
        let rewards = rng::gaussian(&mut r, h, n);
        let values = rng::gaussian(&mut r, h, n);
        let done: Vec<Vec<bool>> = (0..h).map(|_| (0..n).map(|_| r.random_bool(0.2)).collect()).collect();
        let y = td_lambda_targets(&rewards, &values, &done, gamma, lambda, false);
        for i in 0..n {
            let col = |m: &Tensor| (0..h).map(|t| m.get(t, i)).collect::<Vec<_>>();
            let d: Vec<bool> = (0..h).map(|t| done[t][i]).collect();
            let want = lambda_mixture(&col(&rewards), &col(&values), &d, gamma, lambda);
            for (t, w) in want.iter().enumerate() {
                worst = worst.max((y.get(t, i) - w).abs());
            }
        }
    }
    outcome(
        worst < 1e-10,
        format!("max abs difference {worst:.2e} over 100 segments"),
    )
}

fn criterion_4(runs: &mut Runs) -> Outcome {
    let start = Instant::now();
    let base = TrainConfig::default();
    let reference = runs.get(&TrainConfig {
        iterations: 2000,
        ..base.clone()
    });
    let best = reference
        .metrics
        .iter()
        .map(|m| m.eval_return)
        .fold(f64::NEG_INFINITY, f64::max);
    let collect = |runs: &mut Runs, algo: Algo| -> Vec<f64> {
        SEEDS
            .iter()
            .map(|&seed| {
                runs.get(&TrainConfig {
                    seed,
                    algo,
                    ..base.clone()
                })
                .final_return
            })
            .collect()
    };
    let rfo = collect(runs, Algo::Rfo);
    let shac = collect(runs, Algo::ShacGaussian);
    let secs = start.elapsed().as_secs_f64();
    let pooled = ((sample_var(&rfo) + sample_var(&shac)) / 2.0).sqrt();
    let reach = rfo.iter().chain(&shac).all(|&x| within(x, best, 0.1));
    let parity = mean(&rfo) >= mean(&shac) - pooled;
    outcome(
        reach && parity && secs < 600.0,
        format!(
            "reference best {best:.3} (threshold {:.3}); RFO {:.3} [{}]; SHAC-Gaussian {:.3} [{}]; pooled sd {pooled:.3}; {secs:.0} s",
            best - 0.1 * best.abs(),
            mean(&rfo),
            fmt_list(&rfo),
            mean(&shac),
            fmt_list(&shac),
        ),
    )
}

fn fmt_list(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn pendulum(seed: u64, c_past: f64, c_uni: f64) -> TrainConfig {
    TrainConfig {
        env: EnvKind::Pendulum,
        seed,
        c_past,
        c_uni,
        diagnostics: true,
        ..Default::default()
    }
}

fn criterion_5(runs: &mut Runs) -> Outcome {
    let variants = [("full", 0.2, 0.2), ("c_past=0", 0.0, 0.2), ("c_uni=0", 0.2, 0.0)];
    let mut finals = Vec::new();
    let mut monitors = Vec::new();
    for (_, cp, cu) in variants {
        let mut f = Vec::new();
        let mut tail = Vec::new();
        for &seed in &SEEDS {
            let s = runs.get(&pendulum(seed, cp, cu));
            f.push(s.final_return);
            let from = s.metrics.len() * 3 / 4;
            tail.extend(s.metrics[from..].iter().map(|m| m.past_cfm));
        }
        finals.push(mean(&f));
        monitors.push(mean(&tail));
    }
    let order = finals[0] >= finals[1] && finals[0] >= finals[2];
    let monitor = monitors[0] < monitors[1];
    outcome(
        order && monitor,
        format!(
            "final return full {:.2}, c_past=0 {:.2}, c_uni=0 {:.2}; late past-data CFM loss full {:.4} vs c_past=0 {:.4}",
            finals[0], finals[1], finals[2], monitors[0], monitors[1]
        ),
    )
}

fn criterion_6(runs: &mut Runs) -> Outcome {
    // self-KL on a trained policy with shared draws
    let trained = runs.get(&pendulum(0, 0.2, 0.2));
    let Policy::Flow(p) = &trained.policy else {
        return outcome(false, "criterion-5 run did not produce a flow policy".into());
    };
    let snap = PolicySnapshot::capture(&p.net, &p.cfg, &trained.norm);
    let mut r = rng::stream(6, 0);
    let obs = rng::gaussian(&mut r, 128, 3);
    let pre = rng::gaussian(&mut r, 128, 1);
    let draws = diag::draw(&mut r, 128, 256, 1);
    let self_kl = diag::kl_estimate(&snap, &snap, &obs, &pre, &draws, &draws).unwrap().kl;

    let mut negative = 0;
    for _ in 0..100_000 {
        let rho: f64 = (r.random_range(-20.0f64..20.0)).exp();
        if !(diag::k3(rho) >= 0.0) {
            negative += 1;
        }
    }

    let mut rows = 0;
    let mut bad = 0;
    let mut max_kl: f64 = 0.0;
    for (cp, cu) in [(0.2, 0.2), (0.0, 0.2), (0.2, 0.0)] {
        for &seed in &SEEDS {
            let s = runs.get(&pendulum(seed, cp, cu));
            let text = fs::read_to_string(s.dir.join("metrics.csv")).unwrap();
            let cols = trainer::read_metrics_columns(&text);
            let kl = &cols.iter().find(|(n, _)| n == "kl").expect("kl column").1;
            rows += kl.len();
            bad += kl.iter().filter(|v| !v.is_finite() || **v < 0.0).count();
            bad += TrainConfig::default().iterations - kl.len();
            max_kl = kl.iter().copied().fold(max_kl, f64::max);
        }
    }
    outcome(
        self_kl == 0.0 && negative == 0 && bad == 0,
        format!(
            "self-KL {self_kl}; {negative} negative k3 values in 1e5 ratios; {rows} logged KL values, {bad} missing or non-finite, max {max_kl:.3e}"
        ),
    )
}

fn action_ks(policy: &Policy, norm: &ObsNormalizer, seed: u64) -> Vec<f64> {
    let n = 10_000;
    let env = BatchedEnv::new(EnvSpec::new(EnvKind::PointMassFree, 100), n, seed);
    let obs = norm.normalize_values(&env.observations().unwrap());
    let noise = rng::gaussian(&mut rng::stream(seed, rng::streams::EVAL), n, policy.width());
    let (_, a) = policy.sample_values(&obs, &noise).unwrap();
    (0..a.cols())
        .map(|c| ks_uniform(&(0..n).map(|i| a.get(i, c)).collect::<Vec<_>>()))
        .collect()
}

fn criterion_7(runs: &mut Runs) -> Outcome {
    let cfg = TrainConfig {
        env: EnvKind::PointMassFree,
        c_uni: 5.0,
        iterations: 100,
        ..Default::default()
    };
    let before = trainer::Trainer::new(cfg.clone()).unwrap();
    let ks0 = action_ks(before.policy(), before.normalizer(), 7);
    let s = runs.get(&cfg);
    let ks = action_ks(&s.policy, &s.norm, 7);
    outcome(
        ks.iter().all(|&k| k < 0.05),
        format!("KS per coordinate {} (untrained {})", fmt_list(&ks), fmt_list(&ks0)),
    )
}

fn criterion_8(runs: &mut Runs) -> Outcome {
    let short = TrainConfig {
        iterations: 10,
        ..Default::default()
    };
    let plain = runs.get(&short);
    let chunked = runs.get(&TrainConfig {
        chunk_executor: true,
        ..short
    });
    let a = fs::read(plain.dir.join("metrics.csv")).unwrap();
    let b = fs::read(chunked.dir.join("metrics.csv")).unwrap();
    let identical = a == b && plain.policy == chunked.policy;

    let c1 = runs.get(&TrainConfig::default()).final_return;
    let c4 = runs
        .get(&TrainConfig {
            chunk: 4,
            ..Default::default()
        })
        .final_return;
    outcome(
        identical && within(c4, c1, 0.2),
        format!(
            "C=1 chunked vs unchunked metrics {}; final return C=4 {c4:.3} vs C=1 {c1:.3} (threshold {:.3})",
            if identical { "byte-identical" } else { "differ" },
            c1 - 0.2 * c1.abs()
        ),
    )
}

fn criterion_9(runs: &mut Runs) -> Outcome {
    let mut cells = Vec::new();
    for k in [1, 2, 4, 8] {
        let cfg = TrainConfig {
            flow_steps: k,
            ..Default::default()
        };
        cells.push((format!("K={k}"), runs.get(&cfg).final_return));
    }
    let grid = [0.1, 0.2, 0.4];
    for cp in grid {
        for cu in grid {
            let cfg = TrainConfig {
                c_past: cp,
                c_uni: cu,
                ..Default::default()
            };
            cells.push((format!("c=({cp},{cu})"), runs.get(&cfg).final_return));
        }
    }
    let best = cells.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let worst = cells.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    outcome(
        cells.iter().all(|c| within(c.1, best, 0.15)),
        format!(
            "best {best:.3}, threshold {:.3}, worst {} {:.3}; cells {}",
            best - 0.15 * best.abs(),
            worst.0,
            worst.1,
            cells
                .iter()
                .map(|(n, v)| format!("{n}:{v:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    )
}

fn criterion_10(runs: &mut Runs) -> Outcome {
    let cases = [
        TrainConfig::default(),
        TrainConfig {
            algo: Algo::ShacGaussian,
            iterations: 20,
            ..Default::default()
        },
        TrainConfig {
            iterations: 20,
            ..pendulum(3, 0.2, 0.2)
        },
        TrainConfig {
            chunk: 4,
            iterations: 20,
            seed: 11,
            ..Default::default()
        },
    ];
    let mut differing = Vec::new();
    for (i, cfg) in cases.iter().enumerate() {
        let first = runs.get(cfg);
        let again = runs.root.join(format!("repeat_{i}"));
        trainer::train(cfg, Some(&again)).unwrap();
        let a = fs::read(first.dir.join("metrics.csv")).unwrap();
        let b = fs::read(again.join("metrics.csv")).unwrap();
        if a != b || a.is_empty() {
            differing.push(i);
        }
    }
    outcome(
        differing.is_empty(),
        format!(
            "{} invocations repeated, {} differing metrics files",
            cases.len(),
            differing.len()
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let want = |i: usize| selected.is_empty() || selected.contains(&i);
    let tmp = tempfile::tempdir().unwrap();
    let mut runs = Runs {
        root: tmp.path().to_path_buf(),
        done: HashMap::new(),
    };
    let names = [
        "gradient correctness",
        "flow identity and telescoping",
        "TD(lambda) oracle",
        "convergence and baseline parity",
        "regularizer ablation direction",
        "KL diagnostic",
        "uniform exploration",
        "chunking reduction",
        "hyperparameter robustness",
        "determinism",
    ];
    let mut failed = 0;
    for (i, name) in names.iter().enumerate() {
        let id = i + 1;
        if !want(id) {
            continue;
        }
        let start = Instant::now();
        let o = match id {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(&mut runs),
            5 => criterion_5(&mut runs),
            6 => criterion_6(&mut runs),
            7 => criterion_7(&mut runs),
            8 => criterion_8(&mut runs),
            9 => criterion_9(&mut runs),
            _ => criterion_10(&mut runs),
        };
        failed += usize::from(!o.pass);
        println!(
            "{} {id:>2} {name} ({:.1} s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    keep_outputs(tmp.path());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

/// Copies run outputs somewhere persistent when `RFO_ACCEPTANCE_OUT` is set.
fn keep_outputs(from: &Path) {
    let Ok(to) = std::env::var("RFO_ACCEPTANCE_OUT") else {
        return;
    };
    fn copy(from: &Path, to: &Path) {
        fs::create_dir_all(to).unwrap();
        for e in fs::read_dir(from).unwrap().flatten() {
            let p = e.path();
            if p.is_dir() {
                copy(&p, &to.join(e.file_name()));
            } else {
                fs::copy(&p, to.join(e.file_name())).unwrap();
            }
        }
    }
    copy(from, Path::new(&to));
}
