use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use rfo::trainer::read_metrics_columns;

use crate::{CliError, Result};

const W: f64 = 720.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

/// Metrics files named directly, or found in a run directory or its
/// `seed_*` subdirectories.
pub fn metrics_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_file() {
            files.push(p.clone());
            continue;
        }
        let direct = p.join("metrics.csv");
        if direct.is_file() {
            files.push(direct);
            continue;
        }
        let mut found: Vec<PathBuf> = fs::read_dir(p)
            .map_err(|source| CliError::Io {
                path: p.clone(),
                source,
            })?
            .flatten()
            .map(|e| e.path().join("metrics.csv"))
            .filter(|m| m.is_file())
            .collect();
        found.sort();
        if found.is_empty() {
            return Err(CliError::Usage(format!("no metrics.csv under {}", p.display())));
        }
        files.extend(found);
    }
    Ok(files)
}

/// Trailing moving average; the first points average what is available.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for i in 0..xs.len() {
        sum += xs[i];
        if i >= w {
            sum -= xs[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Per-iteration mean and population std across runs.
pub fn mean_std(runs: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let len = runs.iter().map(Vec::len).min().unwrap_or(0);
    let n = runs.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut std = Vec::with_capacity(len);
    for i in 0..len {
        let m = runs.iter().map(|r| r[i]).sum::<f64>() / n;
        mean.push(m);
        std.push((runs.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>() / n).sqrt());
    }
    (mean, std)
}

pub fn render(column: &str, runs: &[Vec<f64>], window: usize) -> String {
    let (mean, std) = mean_std(runs);
    let smooth = moving_average(&mean, window);
    let len = mean.len().max(2);
    let lo = mean.iter().zip(&std).map(|(m, s)| m - s).fold(f64::INFINITY, f64::min);
    let hi = mean
        .iter()
        .zip(&std)
        .map(|(m, s)| m + s)
        .fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo {
        (lo, hi)
    } else {
        (lo.min(0.0) - 1.0, hi.max(0.0) + 1.0)
    };
    let x = |i: usize| MARGIN + (W - 2.0 * MARGIN) * i as f64 / (len - 1) as f64;
    let y = |v: f64| H - MARGIN - (H - 2.0 * MARGIN) * (v - lo) / (hi - lo);
    let path = |vals: &[f64]| {
        vals.iter()
            .enumerate()
            .map(|(i, v)| format!("{}{:.2},{:.2}", if i == 0 { "M" } else { " L" }, x(i), y(*v)))
            .collect::<String>()
    };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{column} ({} runs, {window}-point moving average)</text>"#,
        W / 2.0,
        runs.len()
    );
    if !mean.is_empty() {
        let mut band = String::new();
        for i in 0..mean.len() {
            let _ = write!(band, "{:.2},{:.2} ", x(i), y(mean[i] + std[i]));
        }
        for i in (0..mean.len()).rev() {
            let _ = write!(band, "{:.2},{:.2} ", x(i), y(mean[i] - std[i]));
        }
        let _ = writeln!(
            s,
            r##"<polygon points="{}" fill="#4c72b0" fill-opacity="0.2"/>"##,
            band.trim_end()
        );
        let _ = writeln!(
            s,
            r##"<path d="{}" fill="none" stroke="#4c72b0" stroke-opacity="0.4"/>"##,
            path(&mean)
        );
        let _ = writeln!(
            s,
            r##"<path d="{}" fill="none" stroke="#1f3b73" stroke-width="2"/>"##,
            path(&smooth)
        );
    }
    // axes and ticks
    let (x0, x1, y0, y1) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            y(v) + 4.0,
            tick(v)
        );
        let i = (len - 1) * k / 4;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{i}</text>"#,
            x(i),
            y1 + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">iteration</text>"#,
        W / 2.0,
        H - 16.0
    );
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

pub fn plot(inputs: &[PathBuf], column: &str, window: usize, out: &Path) -> Result<ExitCode> {
    let mut runs = Vec::new();
    for f in metrics_files(inputs)? {
        let text = fs::read_to_string(&f).map_err(|source| CliError::Io {
            path: f.clone(),
            source,
        })?;
        let cols = read_metrics_columns(&text);
        let values = cols
            .into_iter()
            .find(|(n, _)| n == column)
            .ok_or_else(|| CliError::Usage(format!("{} has no column {column:?}", f.display())))?
            .1;
        runs.push(values);
    }
    fs::write(out, render(column, &runs, window)).map_err(|source| CliError::Io {
        path: out.to_path_buf(),
        source,
    })?;
    println!("wrote {} ({} runs)", out.display(), runs.len());
    Ok(ExitCode::SUCCESS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_warms_up() {
        assert_eq!(moving_average(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(moving_average(&[2.0, 4.0], 100), vec![2.0, 3.0]);
    }

    #[test]
    fn band_uses_shortest_run() {
        let (m, s) = mean_std(&[vec![1.0, 2.0, 9.0], vec![3.0, 2.0]]);
        assert_eq!(m, vec![2.0, 2.0]);
        assert_eq!(s, vec![1.0, 0.0]);
    }

    #[test]
    fn render_is_an_svg_document() {
        let svg = render("eval_return", &[vec![-3.0, -2.0, -1.0]], 2);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<path").count(), 3);
        let flat = render("kl", &[vec![0.0, 0.0]], 5);
        assert!(!flat.contains("NaN"));
    }
}
