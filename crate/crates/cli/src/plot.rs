//! Discounted-return curves as SVG: mean over seeds with a standard-error
//! band.

use crate::config::RunConfig;
use crate::train::{read_log, EvalRow, CONFIG_FILE};
use anyhow::{bail, ensure, Context, Result};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One labelled series aggregated over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    /// Standard error of the mean per step; `None` for a single seed.
    pub stderr: Option<Vec<f64>>,
}

/// Averages `return_mean` across runs that share one step grid.
pub fn aggregate(label: &str, runs: &[Vec<EvalRow>]) -> Result<Curve> {
    ensure!(!runs.is_empty(), "series `{label}` has no runs");
    let steps: Vec<u64> = runs[0].iter().map(|r| r.step).collect();
    ensure!(!steps.is_empty(), "series `{label}` has an empty log");
    for (i, run) in runs.iter().enumerate().skip(1) {
        let other: Vec<u64> = run.iter().map(|r| r.step).collect();
        if other != steps {
            bail!("series `{label}`: run {i} has a different step grid from run 0");
        }
    }
    let k = runs.len() as f64;
    let mean: Vec<f64> = (0..steps.len())
        .map(|j| runs.iter().map(|r| r[j].return_mean).sum::<f64>() / k)
        .collect();
    let stderr = (runs.len() > 1).then(|| {
        (0..steps.len())
            .map(|j| {
                let var = runs.iter().map(|r| (r[j].return_mean - mean[j]).powi(2)).sum::<f64>() / (k - 1.0);
                (var / k).sqrt()
            })
            .collect()
    });
    Ok(Curve {
        label: label.to_string(),
        steps,
        mean,
        stderr,
    })
}

/// Splits `label=path` or a bare path. A bare path takes the algorithm
/// name from the run directory's config snapshot, else the file stem.
pub fn parse_input(arg: &str) -> Result<(String, PathBuf)> {
    if let Some((label, path)) = arg.split_once('=') {
        ensure!(!label.is_empty(), "empty label in `{arg}`");
        return Ok((label.to_string(), PathBuf::from(path)));
    }
    let path = PathBuf::from(arg);
    let snapshot = path.parent().map(|d| d.join(CONFIG_FILE));
    let label = match snapshot.filter(|p| p.exists()) {
        Some(p) => RunConfig::load(&p)?.algorithm.to_string(),
        None => path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| arg.to_string()),
    };
    Ok((label, path))
}

/// Groups the inputs by label, in order of first appearance.
pub fn load_curves(args: &[String]) -> Result<Vec<Curve>> {
    ensure!(!args.is_empty(), "no CSV files given");
    let mut groups: Vec<(String, Vec<Vec<EvalRow>>)> = Vec::new();
    for arg in args {
        let (label, path) = parse_input(arg)?;
        let rows = read_log(&path)?;
        match groups.iter_mut().find(|(l, _)| *l == label) {
            Some((_, runs)) => runs.push(rows),
            None => groups.push((label, vec![rows])),
        }
    }
    groups.iter().map(|(l, runs)| aggregate(l, runs)).collect()
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: [f64; 4] = [50.0, 20.0, 30.0, 60.0]; // top, right, bottom, left
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn nice_ticks(lo: f64, hi: f64, target: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= target as f64)
        .unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    (first..=last).map(|i| i as f64 * step).collect()
}

/// Renders the curves with shared axes.
pub fn render_svg(curves: &[Curve], title: &str) -> String {
    let x_max = curves.iter().flat_map(|c| c.steps.iter().copied()).max().unwrap_or(1).max(1) as f64;
    let (mut y_lo, mut y_hi) = (0.0f64, 0.0f64);
    for c in curves {
        for (j, m) in c.mean.iter().enumerate() {
            let e = c.stderr.as_ref().map_or(0.0, |s| s[j]);
            y_lo = y_lo.min(m - e);
            y_hi = y_hi.max(m + e);
        }
    }
    if y_hi - y_lo < 1e-9 {
        y_hi = y_lo + 1.0;
    }
    let (top, right, bottom, left) = (MARGIN[0], MARGIN[1], MARGIN[2], MARGIN[3]);
    let (pw, ph) = (WIDTH - left - right, HEIGHT - top - bottom - 20.0);
    let px = |x: f64| left + x / x_max * pw;
    let py = |y: f64| top + (y_hi - y) / (y_hi - y_lo) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    for t in nice_ticks(0.0, x_max, 6) {
        let x = px(t);
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{top}" x2="{x:.1}" y2="{:.1}" stroke="#eee"/>"##, top + ph);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, top + ph + 16.0, t);
    }
    for t in nice_ticks(y_lo, y_hi, 5) {
        let y = py(t);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#eee"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, left - 6.0, y + 4.0, fmt_tick(t));
    }
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">environment steps</text>"#, left + pw / 2.0, top + ph + 34.0);
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.1}) rotate(-90)" text-anchor="middle">discounted return</text>"#,
        top + ph / 2.0
    );

    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if let Some(se) = &c.stderr {
            let upper = c.steps.iter().zip(&c.mean).zip(se).map(|((&x, m), e)| (x, m + e));
            let lower = c.steps.iter().zip(&c.mean).zip(se).rev().map(|((&x, m), e)| (x, m - e));
            let pts: Vec<String> = upper.chain(lower).map(|(x, y)| format!("{:.2},{:.2}", px(x as f64), py(y))).collect();
            let _ = writeln!(
                s,
                r#"<polygon class="band" data-label="{}" points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#,
                escape(&c.label),
                pts.join(" ")
            );
        }
        let pts: Vec<String> = c
            .steps
            .iter()
            .zip(&c.mean)
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x as f64), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline class="mean" data-label="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(&c.label),
            pts.join(" ")
        );
        let ly = top + 14.0 + 16.0 * i as f64;
        let lx = left + 10.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&c.label));
    }
    s.push_str("</svg>\n");
    s
}

fn fmt_tick(v: f64) -> String {
    let r = (v * 1e6).round() / 1e6;
    format!("{r}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Reads the logs and writes the chart to `out`.
pub fn plot(args: &[String], out: &Path, title: &str) -> Result<Vec<Curve>> {
    let curves = load_curves(args)?;
    std::fs::write(out, render_svg(&curves, title)).with_context(|| format!("writing {}", out.display()))?;
    Ok(curves)
}
