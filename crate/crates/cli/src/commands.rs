use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rfo::config::TrainConfig;
use rfo::diag::{self, PolicySnapshot};
use rfo::env::{BatchedEnv, EnvSpec};
use rfo::gradcheck;
use rfo::rng;
use rfo::rpg::Policy;
use rfo::trainer::{self, TrainError, Trainer};

use crate::{CliError, ConfigArgs, OutArgs, Result};

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io(dir))?;
    }
    fs::write(path, text).map_err(io(path))
}

/// File, then `--set` overrides, then `--algo`; validated.
pub fn load_config(args: &ConfigArgs, fallback: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = args.config.as_deref().or(fallback) {
        let text = fs::read_to_string(path).map_err(io(path))?;
        cfg.apply_text(&text).map_err(|source| CliError::Config {
            path: path.display().to_string(),
            source,
        })?;
    }
    for o in &args.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| CliError::Override(o.clone()))?;
        cfg.set(k, v).map_err(|source| CliError::Config {
            path: "--set".into(),
            source,
        })?;
    }
    if let Some(a) = &args.algo {
        cfg.set("algo", a).map_err(|source| CliError::Config {
            path: "--algo".into(),
            source,
        })?;
    }
    cfg.validate().map_err(|source| CliError::Config {
        path: "config".into(),
        source,
    })?;
    Ok(cfg)
}

/// `n`, inclusive `a..b`, or `a,b,c`.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let bad = || CliError::Seeds(text.to_string());
    let t = text.trim();
    if let Some((a, b)) = t.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    t.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn seeds(out: &OutArgs, cfg: &TrainConfig) -> Result<Vec<u64>> {
    match &out.seeds {
        Some(s) => parse_seeds(s),
        None => Ok(vec![cfg.seed]),
    }
}

fn train_seeds(cfg: &TrainConfig, seeds: &[u64], dir: &Path) -> Result<Vec<(u64, f64, f64)>> {
    let mut results = Vec::new();
    for &seed in seeds {
        let c = TrainConfig { seed, ..cfg.clone() };
        let run_dir = dir.join(format!("seed_{seed}"));
        let out = trainer::train(&c, Some(&run_dir))?;
        println!(
            "seed {seed}: final eval {:.4} ± {:.4} after {} iterations -> {}",
            out.final_eval.mean,
            out.final_eval.std,
            out.metrics.len(),
            run_dir.display()
        );
        results.push((seed, out.final_eval.mean, out.final_eval.std));
    }
    Ok(results)
}

pub fn train(args: &ConfigArgs, out: &OutArgs) -> Result<ExitCode> {
    let cfg = load_config(args, None)?;
    train_seeds(&cfg, &seeds(out, &cfg)?, &out.out)?;
    Ok(ExitCode::SUCCESS)
}

/// `run/checkpoints/x.rfo` -> `run/config.cfg`, when present.
fn run_config_for(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.parent()?.join("config.cfg");
    p.exists().then_some(p)
}

pub fn eval(
    args: &ConfigArgs,
    checkpoint: &Path,
    episodes: Option<usize>,
    seed: u64,
    out: Option<&Path>,
) -> Result<ExitCode> {
    let fallback = run_config_for(checkpoint);
    let cfg = load_config(args, fallback.as_deref())?;
    let mut t = Trainer::new(cfg.clone())?;
    t.load(checkpoint)?;
    let episodes = episodes.unwrap_or(cfg.eval_episodes);
    let e = t.evaluate(episodes, seed)?;
    println!("{:.6} ± {:.6} over {episodes} episodes", e.mean, e.std);
    let mut csv = String::from("episode,return\n");
    for (i, r) in e.returns.iter().enumerate() {
        let _ = writeln!(csv, "{i},{r}");
    }
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| checkpoint.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    write(&dir.join("eval.csv"), &csv)?;
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(seed: u64) -> Result<ExitCode> {
    let rows = gradcheck::run(seed)?;
    println!(
        "{:<8} {:<34} {:>7} {:>12}  status",
        "module", "quantity", "checked", "max rel err"
    );
    let mut ok = true;
    for r in &rows {
        ok &= r.passed();
        println!(
            "{:<8} {:<34} {:>7} {:>12.3e}  {}",
            r.module,
            r.quantity,
            r.checked,
            r.max_rel,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("tolerance {:e}, step {:e}", gradcheck::TOLERANCE, gradcheck::STEP);
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

/// Axes of `key=v1,v2` form, expanded to every combination.
pub fn grid_cells(axes: &[String]) -> Result<Vec<Vec<(String, String)>>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        let (k, vs) = axis.split_once('=').ok_or_else(|| CliError::Grid(axis.clone()))?;
        let values: Vec<&str> = vs.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if k.trim().is_empty() || values.is_empty() {
            return Err(CliError::Grid(axis.clone()));
        }
        cells = cells
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push((k.trim().to_string(), v.to_string()));
                    c
                })
            })
            .collect();
    }
    Ok(cells)
}

fn cell_name(cell: &[(String, String)]) -> String {
    cell.iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("_")
}

pub fn ablate(args: &ConfigArgs, out: &OutArgs, axes: &[String]) -> Result<ExitCode> {
    let base = load_config(args, None)?;
    let cells = grid_cells(axes)?;
    let seeds = seeds(out, &base)?;
    let mut summary = String::from("cell,seed,final_return,final_std\n");
    let mut means = Vec::new();
    for cell in &cells {
        let mut cfg = base.clone();
        for (k, v) in cell {
            cfg.set(k, v).map_err(|source| CliError::Config {
                path: "grid".into(),
                source,
            })?;
        }
        cfg.validate().map_err(|source| CliError::Config {
            path: "grid".into(),
            source,
        })?;
        let name = cell_name(cell);
        println!("cell {name}");
        let results = train_seeds(&cfg, &seeds, &out.out.join(&name))?;
        for (seed, m, s) in &results {
            let _ = writeln!(summary, "{name},{seed},{m},{s}");
        }
        means.push((name, results.iter().map(|r| r.1).sum::<f64>() / results.len() as f64));
    }
    write(&out.out.join("ablation.csv"), &summary)?;
    let best = means.iter().map(|m| m.1).fold(f64::NEG_INFINITY, f64::max);
    println!("{:<32} {:>12} {:>14}", "cell", "mean return", "gap to best");
    for (name, m) in &means {
        println!(
            "{name:<32} {m:>12.4} {:>13.1}%",
            100.0 * (best - m) / best.abs().max(f64::MIN_POSITIVE)
        );
    }
    Ok(ExitCode::SUCCESS)
}

/// Stored checkpoints of a run in iteration order.
fn checkpoints(run: &Path) -> Result<Vec<PathBuf>> {
    let dir = run.join("checkpoints");
    let mut iters: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(io(&dir))?
        .flatten()
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("iter_") && n.ends_with(".rfo"))
        })
        .collect();
    iters.sort();
    let last = dir.join("final.rfo");
    if last.exists() {
        iters.push(last);
    }
    Ok(iters)
}

pub fn kl_monitor(run: &Path, pairs: usize, draws: usize, seed: u64) -> Result<ExitCode> {
    let cfg_path = run.join("config.cfg");
    let cfg = load_config(
        &ConfigArgs {
            config: Some(cfg_path),
            overrides: Vec::new(),
            algo: None,
        },
        None,
    )?;
    let base = Trainer::new(cfg.clone())?;
    if !matches!(base.policy(), Policy::Flow(_)) {
        return Err(CliError::Usage("kl-monitor needs a flow-policy run".into()));
    }
    let mut snaps = Vec::new();
    for path in checkpoints(run)? {
        let mut t = base.clone();
        t.load(&path)?;
        if snaps.last().is_some_and(|(it, _, _)| *it == t.iteration()) {
            continue;
        }
        let Policy::Flow(p) = t.policy() else { unreachable!() };
        let snap = PolicySnapshot::capture(&p.net, &p.cfg, t.normalizer());
        snaps.push((t.iteration(), snap, t.policy().clone()));
    }
    if snaps.len() < 2 {
        return Err(CliError::Usage(format!(
            "{} holds fewer than two checkpoints",
            run.display()
        )));
    }
    let spec = EnvSpec::new(cfg.env, cfg.episode_len);
    let mut csv = String::from("from_iteration,to_iteration,kl,kl_clamped,old_loss,new_loss\n");
    println!(
        "{:>6} {:>6} {:>12} {:>8} {:>10} {:>10}",
        "from", "to", "kl", "clamped", "old cfm", "new cfm"
    );
    for (i, w) in snaps.windows(2).enumerate() {
        let ((from, old, policy), (to, new, _)) = (&w[0], &w[1]);
        let s = rng::derive(seed, i as u64, 0);
        let env = BatchedEnv::new(spec.clone(), pairs, s);
        let obs = env.observations().map_err(TrainError::from)?;
        let mut r = rng::stream(s, rng::streams::DIAG);
        let noise = rng::gaussian(&mut r, pairs, policy.width());
        let normed = old.normalizer().normalize_values(&obs);
        let (pre, _) = policy.sample_values(&normed, &noise).map_err(TrainError::from)?;
        let d = diag::draw(&mut r, pairs, draws, policy.width());
        let est = diag::kl_estimate(old, new, &obs, &pre, &d, &d).map_err(TrainError::from)?;
        let _ = writeln!(
            csv,
            "{from},{to},{},{},{},{}",
            est.kl, est.clamped, est.old_loss, est.new_loss
        );
        println!(
            "{from:>6} {to:>6} {:>12.4e} {:>8} {:>10.4} {:>10.4}",
            est.kl, est.clamped, est.old_loss, est.new_loss
        );
    }
    write(&run.join("kl_monitor.csv"), &csv)?;
    Ok(ExitCode::SUCCESS)
}
