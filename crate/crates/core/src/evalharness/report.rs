use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SweepAxis, SweepResult};
use crate::error::{Error, Result};
use crate::fsutil;

pub const SWEEP_FILE: &str = "sweep.json";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const TREND_SVG: &str = "trend.svg";

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// A named sweep, one polyline in the trend plot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSweep {
    pub system: String,
    pub sweep: SweepResult,
}

pub fn write_sweep(sweep: &SweepResult, path: impl AsRef<Path>) -> Result<()> {
    let mut json = serde_json::to_string_pretty(sweep)?;
    json.push('\n');
    fsutil::write_atomic(path.as_ref(), json.as_bytes())
}

pub fn read_sweep(path: impl AsRef<Path>) -> Result<SweepResult> {
    let sweep: SweepResult = serde_json::from_str(&fsutil::read_to_string(path.as_ref())?)?;
    sweep.validate()?;
    Ok(sweep)
}

/// CSV with columns `axis,f1_avg,f1_max,f1_std,n_seeds`, one row per point.
pub fn summary_csv(sweep: &SweepResult) -> String {
    let mut out = String::from("axis,f1_avg,f1_max,f1_std,n_seeds\n");
    for p in &sweep.points {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{}",
            p.value, p.stats.f1_avg, p.stats.f1_max, p.stats.f1_std, p.stats.n_seeds
        )
        .expect("write to string");
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn axis_label(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::Block => "block",
        SweepAxis::MPlus => "M+ (augmented sub-dialogues per positive session)",
    }
}

/// F1-avg against the sweep axis, one polyline and legend entry per system.
pub fn render_svg(systems: &[SystemSweep]) -> Result<String> {
    let first = systems
        .first()
        .ok_or_else(|| Error::Validation("nothing to plot".into()))?;
    let axis = first.sweep.axis;
    if systems.iter().any(|s| s.sweep.axis != axis) {
        return Err(Error::Validation("systems were swept along different axes".into()));
    }
    let values: Vec<u64> = systems.iter().flat_map(|s| s.sweep.points.iter().map(|p| p.value)).collect();
    let (lo, hi) = match (values.iter().min(), values.iter().max()) {
        (Some(&lo), Some(&hi)) => (lo as f64, hi as f64),
        _ => return Err(Error::Validation("sweeps have no points".into())),
    };
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 180.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x = |v: u64| {
        if hi > lo {
            left + (v as f64 - lo) / (hi - lo) * pw
        } else {
            left + pw / 2.0
        }
    };
    let y = |f: f64| top + (1.0 - f.clamp(0.0, 1.0)) * ph;

    let mut svg = String::new();
    let mut line = |s: String| {
        svg.push_str(&s);
        svg.push('\n');
    };
    line(format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    ));
    line(format!(r#"<rect width="{w}" height="{h}" fill="white"/>"#));
    line(format!(
        r#"<line x1="{left}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/>"#,
        b = top + ph,
        r = left + pw
    ));
    line(format!(r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{b}" stroke="black"/>"#, b = top + ph));
    for tick in 0..=5 {
        let f = tick as f64 / 5.0;
        line(format!(
            r#"<text x="{tx}" y="{ty:.1}" text-anchor="end">{f:.1}</text>"#,
            tx = left - 6.0,
            ty = y(f) + 4.0
        ));
    }
    let mut ticks = values.clone();
    ticks.sort_unstable();
    ticks.dedup();
    for v in &ticks {
        line(format!(
            r#"<text x="{tx:.1}" y="{ty}" text-anchor="middle">{v}</text>"#,
            tx = x(*v),
            ty = top + ph + 16.0
        ));
    }
    line(format!(
        r#"<text x="{cx:.1}" y="{cy}" text-anchor="middle">{}</text>"#,
        escape(axis_label(axis)),
        cx = left + pw / 2.0,
        cy = h - 12.0
    ));
    line(format!(
        r#"<text x="16" y="{cy:.1}" text-anchor="middle" transform="rotate(-90 16 {cy:.1})">F1-avg</text>"#,
        cy = top + ph / 2.0
    ));

    for (i, s) in systems.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = s
            .sweep
            .points
            .iter()
            .map(|p| format!("{:.1},{:.1}", x(p.value), y(p.stats.f1_avg)))
            .collect();
        line(format!(
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        ));
        for p in &s.sweep.points {
            line(format!(
                r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#,
                x(p.value),
                y(p.stats.f1_avg)
            ));
        }
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = left + pw + 16.0;
        line(format!(
            r#"<line x1="{lx}" y1="{ly}" x2="{x2}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            x2 = lx + 20.0
        ));
        line(format!(
            r#"<text x="{tx}" y="{ty}">{}</text>"#,
            escape(&s.system),
            tx = lx + 26.0,
            ty = ly + 4.0
        ));
    }
    line("</svg>".to_string());
    Ok(svg)
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `summary.csv`, `summary.json` and `trend.svg` into `out`.
///
/// `summary.csv` concatenates the systems in input order; with more than one
/// system each also gets its own `summary.<system>.csv`.
pub fn report(systems: &[SystemSweep], out: impl AsRef<Path>) -> Result<()> {
    let out = out.as_ref();
    if systems.is_empty() || systems.iter().all(|s| s.sweep.points.is_empty()) {
        return Err(Error::Validation("report needs at least one completed sweep".into()));
    }
    for s in systems {
        s.sweep.validate()?;
    }
    let svg = render_svg(systems)?;

    let mut csv = String::from("axis,f1_avg,f1_max,f1_std,n_seeds\n");
    for s in systems {
        let one = summary_csv(&s.sweep);
        csv.push_str(one.split_once('\n').map_or("", |(_, rows)| rows));
        if systems.len() > 1 {
            fsutil::write_atomic(&out.join(format!("summary.{}.csv", file_safe(&s.system))), one.as_bytes())?;
        }
    }
    fsutil::write_atomic(&out.join(SUMMARY_CSV), csv.as_bytes())?;
    let mut json = serde_json::to_string_pretty(systems)?;
    json.push('\n');
    fsutil::write_atomic(&out.join(SUMMARY_JSON), json.as_bytes())?;
    fsutil::write_atomic(&out.join(TREND_SVG), svg.as_bytes())
}
