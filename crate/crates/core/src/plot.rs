//! Learning-curve SVG from metrics files. Files whose names differ only in
//! the `_seed<N>` suffix form one group, drawn as a mean line with a ±1 std
//! band.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::trainer::read_metrics;
use crate::{CoreError, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 190.0;
const MARGIN_Y: f64 = 40.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

/// Aggregated curve of one group.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub runs: usize,
    pub steps: Vec<u64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// `cartpole_swingup_vit_mae_seed3` → `cartpole_swingup_vit_mae`.
pub fn group_label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match stem.rfind("_seed") {
        Some(i) if stem[i + 5..].chars().all(|c| c.is_ascii_digit()) && i + 5 < stem.len() => stem[..i].to_string(),
        _ => stem,
    }
}

pub fn load_curves(paths: &[PathBuf]) -> Result<Vec<Curve>> {
    if paths.is_empty() {
        return Err(CoreError::Plot("no metrics files given".into()));
    }
    let mut groups: BTreeMap<String, Vec<(PathBuf, Vec<(u64, f64)>)>> = BTreeMap::new();
    for p in paths {
        let rows = read_metrics(p)?;
        if rows.is_empty() {
            return Err(CoreError::Plot(format!("{} has no rows", p.display())));
        }
        let pts = rows.iter().map(|r| (r.agent_step, r.mean_return)).collect();
        groups.entry(group_label(p)).or_default().push((p.clone(), pts));
    }
    groups
        .into_iter()
        .map(|(label, runs)| {
            let steps: Vec<u64> = runs[0].1.iter().map(|&(s, _)| s).collect();
            for (p, pts) in &runs[1..] {
                if pts.iter().map(|&(s, _)| s).ne(steps.iter().copied()) {
                    return Err(CoreError::Plot(format!(
                        "{} has a different step grid than {}",
                        p.display(),
                        runs[0].0.display()
                    )));
                }
            }
            let n = runs.len() as f64;
            let (mut mean, mut std) = (Vec::new(), Vec::new());
            for i in 0..steps.len() {
                let m = runs.iter().map(|r| r.1[i].1).sum::<f64>() / n;
                let v = runs.iter().map(|r| (r.1[i].1 - m).powi(2)).sum::<f64>() / n;
                mean.push(m);
                std.push(v.sqrt());
            }
            Ok(Curve { label, runs: runs.len(), steps, mean, std })
        })
        .collect()
}

/// Round tick spacing covering `span` with roughly `target` ticks.
fn tick_step(span: f64, target: f64) -> f64 {
    let raw = (span / target).max(f64::MIN_POSITIVE);
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|&s| s >= raw).unwrap_or(10.0 * mag)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn render_svg(curves: &[Curve]) -> String {
    let x_max = curves.iter().flat_map(|c| c.steps.iter()).copied().max().unwrap_or(1).max(1) as f64;
    let lo = curves.iter().flat_map(|c| c.mean.iter().zip(&c.std).map(|(m, s)| m - s)).fold(f64::INFINITY, f64::min);
    let hi = curves.iter().flat_map(|c| c.mean.iter().zip(&c.std).map(|(m, s)| m + s)).fold(f64::NEG_INFINITY, f64::max);
    let (y_min, mut y_max) = (lo.min(0.0), hi.max(1.0));
    if y_max <= y_min {
        y_max = y_min + 1.0;
    }
    let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let ph = HEIGHT - 2.0 * MARGIN_Y;
    let sx = |x: f64| MARGIN_LEFT + x / x_max * pw;
    let sy = |y: f64| MARGIN_Y + (1.0 - (y - y_min) / (y_max - y_min)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_Y}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let xs = tick_step(x_max, 5.0);
    let mut x = 0.0;
    while x <= x_max + 1e-9 {
        let px = sx(x);
        let _ = writeln!(s, r##"<line x1="{px:.2}" y1="{:.2}" x2="{px:.2}" y2="{:.2}" stroke="#ddd"/>"##, MARGIN_Y, MARGIN_Y + ph);
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{x}</text>"#, MARGIN_Y + ph + 16.0);
        x += xs;
    }
    let ys = tick_step(y_max - y_min, 5.0);
    let mut y = (y_min / ys).ceil() * ys;
    while y <= y_max + 1e-9 {
        let py = sy(y);
        let _ = writeln!(s, r##"<line x1="{MARGIN_LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ddd"/>"##, MARGIN_LEFT + pw);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y}</text>"#, MARGIN_LEFT - 6.0, py + 4.0);
        y += ys;
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">agent steps</text>"#, MARGIN_LEFT + pw / 2.0, HEIGHT - 6.0);
    let _ = writeln!(
        s,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">eval return</text>"#,
        MARGIN_Y + ph / 2.0
    );

    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if c.runs > 1 {
            let upper = c.steps.iter().zip(c.mean.iter().zip(&c.std)).map(|(&x, (m, d))| (x, m + d));
            let lower = c.steps.iter().zip(c.mean.iter().zip(&c.std)).rev().map(|(&x, (m, d))| (x, m - d));
            let pts: Vec<String> = upper.chain(lower).map(|(x, y)| format!("{:.2},{:.2}", sx(x as f64), sy(y))).collect();
            let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.2" stroke="none"/>"#, pts.join(" "));
        }
        let pts: Vec<String> = c.steps.iter().zip(&c.mean).map(|(&x, &y)| format!("{:.2},{:.2}", sx(x as f64), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        let ly = MARGIN_Y + 14.0 + 18.0 * i as f64;
        let lx = MARGIN_LEFT + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}">{} (n={})</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(&c.label),
            c.runs
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Reads metrics files and writes one SVG with every group's curve.
pub fn emit_plot(inputs: &[PathBuf], out: impl AsRef<Path>) -> Result<Vec<Curve>> {
    let curves = load_curves(inputs)?;
    std::fs::write(out, render_svg(&curves))?;
    Ok(curves)
}
