//! Forecast files (`turbine,step,power`) and their SVG rendering.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CliError, CliResult};

/// Per-turbine series keyed by horizon step; `None` marks a missing value.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesFile {
    pub turbines: Vec<String>,
    pub steps: Vec<usize>,
    /// `values[turbine][step]`
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn read_series(path: &Path) -> CliResult<SeriesFile> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let header = rdr.headers().map_err(|e| CliError::Io(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != ["turbine", "step", "power"] {
        return Err(CliError::usage(format!("{}: expected header turbine,step,power", path.display())));
    }
    let mut turbines: Vec<String> = Vec::new();
    let mut steps: Vec<usize> = Vec::new();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Io(e.to_string()))?;
        let bad = || CliError::usage(format!("{}: malformed row {}", path.display(), i + 2));
        let step: usize = rec[1].parse().map_err(|_| bad())?;
        let value = if rec[2].is_empty() { None } else { Some(rec[2].parse::<f64>().map_err(|_| bad())?) };
        if !turbines.contains(&rec[0].to_string()) {
            turbines.push(rec[0].to_string());
        }
        if !steps.contains(&step) {
            steps.push(step);
        }
        rows.push((rec[0].to_string(), step, value));
    }
    if rows.is_empty() {
        return Err(CliError::usage(format!("{}: no rows", path.display())));
    }
    steps.sort_unstable();
    let mut values = vec![vec![None; steps.len()]; turbines.len()];
    let mut seen = vec![vec![false; steps.len()]; turbines.len()];
    for (t, s, v) in rows {
        let ti = turbines.iter().position(|x| *x == t).unwrap();
        let si = steps.binary_search(&s).unwrap();
        if std::mem::replace(&mut seen[ti][si], true) {
            return Err(CliError::usage(format!("{}: duplicate row for turbine {t}, step {s}", path.display())));
        }
        values[ti][si] = v;
    }
    if seen.iter().flatten().any(|&s| !s) {
        return Err(CliError::usage(format!("{}: incomplete turbine/step grid", path.display())));
    }
    Ok(SeriesFile { turbines, steps, values })
}

pub fn write_series(path: &Path, turbines: &[String], rows: &[Vec<Option<f64>>]) -> CliResult<()> {
    let mut out = String::from("turbine,step,power\n");
    for (id, row) in turbines.iter().zip(rows) {
        for (k, v) in row.iter().enumerate() {
            match v {
                Some(v) => writeln!(out, "{id},{},{v:?}", k + 1),
                None => writeln!(out, "{id},{},", k + 1),
            }
            .unwrap();
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

const WIDTH: f64 = 720.0;
const PANEL: f64 = 220.0;
const MARGIN: f64 = 40.0;

fn points(values: &[Option<f64>], steps: &[usize], lo: f64, hi: f64, top: f64) -> String {
    let (s0, s1) = (steps[0] as f64, *steps.last().unwrap() as f64);
    let span_x = (s1 - s0).max(1.0);
    let span_y = (hi - lo).max(1e-9);
    let mut out = String::new();
    for (v, &s) in values.iter().zip(steps) {
        if let Some(v) = v {
            let x = MARGIN + (s as f64 - s0) / span_x * (WIDTH - 2.0 * MARGIN);
            let y = top + PANEL - MARGIN - (v - lo) / span_y * (PANEL - 2.0 * MARGIN);
            let _ = write!(out, "{}{x:.2},{y:.2}", if out.is_empty() { "" } else { " " });
        }
    }
    out
}

/// One panel per selected turbine with a forecast and a truth polyline.
pub fn render_svg(forecast: &SeriesFile, truth: &SeriesFile, selected: &[usize]) -> CliResult<String> {
    if forecast.turbines != truth.turbines || forecast.steps != truth.steps {
        return Err(CliError::usage("forecast and truth files cover different turbine/step grids"));
    }
    let height = PANEL * selected.len() as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (panel, &ti) in selected.iter().enumerate() {
        let top = panel as f64 * PANEL;
        let all: Vec<f64> = forecast.values[ti].iter().chain(&truth.values[ti]).flatten().copied().collect();
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min).min(0.0);
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max).max(lo + 1.0);
        let (x0, x1) = (MARGIN, WIDTH - MARGIN);
        let (y0, y1) = (top + MARGIN, top + PANEL - MARGIN);
        let _ = writeln!(svg, r#"<g id="turbine-{}">"#, forecast.turbines[ti]);
        let _ = writeln!(
            svg,
            r#"<path d="M{x0},{y0} L{x0},{y1} L{x1},{y1}" fill="none" stroke="black" stroke-width="1"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{x0}" y="{}" font-family="sans-serif" font-size="12">turbine {}: forecast (blue) vs truth (black), {lo:.1} to {hi:.1}</text>"#,
            top + 20.0,
            forecast.turbines[ti]
        );
        for (class, colour, series) in [("truth", "black", &truth.values[ti]), ("forecast", "steelblue", &forecast.values[ti])] {
            let _ = writeln!(
                svg,
                r#"<polyline class="{class}" fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#,
                points(series, &forecast.steps, lo, hi, top)
            );
        }
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}
