//! Trace serialization and plot rendering.
//!
//! A trace is a CSV file with one row per recorded step plus a JSON sidecar
//! at `<path>.meta.json` holding everything needed to rerun it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lab::{ExperimentSpec, OracleRange, RunResult, TraceRecord};

pub const TRACE_SCHEMA: &str = "qrange-trace-v1";
pub const TRACE_HEADER: &str = "step,loss,theta_min,theta_max,s,z,enc_a,enc_b,clamp_event";

/// Columns that can be plotted.
pub const PLOT_FIELDS: [&str; 7] = ["loss", "theta_min", "theta_max", "s", "z", "enc_a", "enc_b"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {err}")]
    File { path: String, err: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub schema: String,
    pub spec: ExperimentSpec,
    pub oracle: Option<OracleRange>,
    pub final_mse: f64,
    pub diverged: bool,
}

/// Renders `x` with 9 significant digits.
pub fn fmt_sig9(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.8e}")
    } else {
        // NaN, inf and -inf all parse back through f64::from_str.
        format!("{x}")
    }
}

fn read_file(path: &Path) -> Result<String, IoError> {
    fs::read_to_string(path).map_err(|err| IoError::File { path: path.display().to_string(), err })
}

fn write_file(path: &Path, contents: &str) -> Result<(), IoError> {
    fs::write(path, contents).map_err(|err| IoError::File { path: path.display().to_string(), err })
}

pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

pub fn trace_to_csv(trace: &[TraceRecord]) -> String {
    let mut out = String::with_capacity(64 * (trace.len() + 1));
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in trace {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            fmt_sig9(r.loss),
            fmt_sig9(r.theta_min),
            fmt_sig9(r.theta_max),
            fmt_sig9(r.s),
            fmt_sig9(r.z),
            fmt_sig9(r.enc_a),
            fmt_sig9(r.enc_b),
            u8::from(r.clamp_event)
        );
    }
    out
}

/// Writes the trace CSV and its metadata sidecar.
pub fn write_trace_csv(result: &RunResult, path: &Path) -> Result<(), IoError> {
    write_file(path, &trace_to_csv(&result.trace))?;
    let meta = TraceMeta {
        schema: TRACE_SCHEMA.to_string(),
        spec: result.spec.clone(),
        oracle: result.oracle,
        final_mse: result.final_mse,
        diverged: result.diverged,
    };
    write_file(&meta_path(path), &serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn parse_trace_csv(text: &str, origin: &str) -> Result<Vec<TraceRecord>, IoError> {
    let err = |line: usize, msg: String| IoError::Parse { path: origin.to_string(), line, msg };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == TRACE_HEADER => {}
        Some(h) => return Err(err(1, format!("unexpected header {h:?}"))),
        None => return Err(err(1, "empty file".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.trim_end().split(',').collect();
        if cols.len() != 9 {
            return Err(err(lineno, format!("expected 9 columns, found {}", cols.len())));
        }
        let real = |j: usize| {
            cols[j]
                .parse::<f64>()
                .map_err(|e| err(lineno, format!("column {j}: {e}")))
        };
        let step = cols[0]
            .parse::<usize>()
            .map_err(|e| err(lineno, format!("step: {e}")))?;
        let clamp_event = match cols[8] {
            "0" => false,
            "1" => true,
            other => return Err(err(lineno, format!("clamp_event must be 0 or 1, got {other:?}"))),
        };
        out.push(TraceRecord {
            step,
            loss: real(1)?,
            theta_min: real(2)?,
            theta_max: real(3)?,
            s: real(4)?,
            z: real(5)?,
            enc_a: real(6)?,
            enc_b: real(7)?,
            clamp_event,
        });
    }
    Ok(out)
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRecord>, IoError> {
    parse_trace_csv(&read_file(path)?, &path.display().to_string())
}

pub fn read_trace_meta(path: &Path) -> Result<TraceMeta, IoError> {
    let meta: TraceMeta = serde_json::from_str(&read_file(&meta_path(path))?)?;
    if meta.schema != TRACE_SCHEMA {
        return Err(IoError::Parse {
            path: meta_path(path).display().to_string(),
            line: 1,
            msg: format!("unsupported schema {:?}", meta.schema),
        });
    }
    Ok(meta)
}

fn field_value(r: &TraceRecord, field: &str) -> f64 {
    match field {
        "loss" => r.loss,
        "theta_min" => r.theta_min,
        "theta_max" => r.theta_max,
        "s" => r.s,
        "z" => r.z,
        "enc_a" => r.enc_a,
        "enc_b" => r.enc_b,
        _ => unreachable!("fields are validated before plotting"),
    }
}

/// One line of a plot.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

const WIDTH: f64 = 900.0;
const HEIGHT: f64 = 560.0;
const LEFT: f64 = 90.0;
const RIGHT: f64 = 250.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 || (1e-3..1e4).contains(&v.abs()) {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.2e}")
    }
}

/// Line chart of `series` with axes, ticks and a legend. Non-finite points
/// are skipped. Output depends only on the input.
pub fn svg_line_chart(series: &[Series], x_label: &str, y_label: &str) -> String {
    let finite = series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 <= 0.0 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 <= 0.0 {
        let pad = if y0 == 0.0 { 1.0 } else { y0.abs() * 0.05 };
        y0 -= pad;
        y1 += pad;
    }

    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );

    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let (gx, gy) = (px(xv), py(yv));
        let _ = writeln!(
            svg,
            r##"<line x1="{gx:.2}" y1="{TOP}" x2="{gx:.2}" y2="{:.2}" stroke="#dddddd"/>"##,
            TOP + ph
        );
        let _ = writeln!(
            svg,
            r#"<text x="{gx:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph + 18.0,
            tick_label(xv)
        );
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{gy:.2}" x2="{:.2}" y2="{gy:.2}" stroke="#dddddd"/>"##,
            LEFT + pw
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
            LEFT - 6.0,
            gy + 4.0,
            tick_label(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        HEIGHT - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="20" y="{:.2}" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        TOP + ph / 2.0,
        TOP + ph / 2.0,
        escape(y_label)
    );

    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut pts = String::new();
        for &(x, y) in s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            if !pts.is_empty() {
                pts.push(' ');
            }
            let _ = write!(pts, "{:.2},{:.2}", px(x), py(y));
        }
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>"#
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="3"/>"#,
            lx + 20.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Plots `fields` of every trace against step, one line per (trace, field).
/// Legend entries come from the metadata sidecar when present, otherwise
/// from the file name.
pub fn render_svg_plot(traces: &[PathBuf], fields: &[String], path: &Path) -> Result<(), IoError> {
    if traces.is_empty() {
        return Err(IoError::Usage("at least one trace is required".into()));
    }
    if fields.is_empty() {
        return Err(IoError::Usage("at least one field is required".into()));
    }
    if let Some(bad) = fields.iter().find(|f| !PLOT_FIELDS.contains(&f.as_str())) {
        return Err(IoError::Usage(format!(
            "unknown field {bad:?} (expected one of {})",
            PLOT_FIELDS.join(", ")
        )));
    }
    let mut series = Vec::with_capacity(traces.len() * fields.len());
    for t in traces {
        let records = read_trace_csv(t)?;
        let name = match read_trace_meta(t) {
            Ok(meta) => meta.spec.label(),
            Err(IoError::File { err, .. }) if err.kind() == std::io::ErrorKind::NotFound => t
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| t.display().to_string()),
            Err(e) => return Err(e),
        };
        for f in fields {
            series.push(Series {
                label: format!("{name} {f}"),
                points: records.iter().map(|r| (r.step as f64, field_value(r, f))).collect(),
            });
        }
    }
    write_file(path, &svg_line_chart(&series, "step", &fields.join(", ")))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(step: usize, v: f64) -> TraceRecord {
        TraceRecord {
            step,
            loss: v,
            theta_min: -v,
            theta_max: 2.0 * v,
            s: v / 7.0,
            z: -3.5,
            enc_a: v,
            enc_b: -v,
            clamp_event: step % 2 == 1,
        }
    }

    #[test]
    fn sig9_round_trips_to_nine_digits() {
        for v in [0.0, 1.0, -2.5, 1.0 / 3.0, 6.02214076e23, -1.234567891234e-17] {
            let back: f64 = fmt_sig9(v).parse().unwrap();
            assert!((back - v).abs() <= v.abs() * 5e-9, "{v} -> {back}");
        }
        assert!(fmt_sig9(f64::NAN).parse::<f64>().unwrap().is_nan());
        assert_eq!(fmt_sig9(f64::NEG_INFINITY).parse::<f64>().unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn csv_header_and_clamp_column() {
        let csv = trace_to_csv(&[record(0, 1.0), record(1, 2.0)]);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), TRACE_HEADER);
        assert!(lines.next().unwrap().ends_with(",0"));
        assert!(lines.next().unwrap().ends_with(",1"));
        assert!(lines.next().is_none());
    }

    #[test]
    fn parse_rejects_bad_rows() {
        let bad_header = "step,loss\n0,1\n";
        assert!(matches!(parse_trace_csv(bad_header, "x"), Err(IoError::Parse { line: 1, .. })));
        let bad_clamp = format!("{TRACE_HEADER}\n0,1,1,1,1,1,1,1,2\n");
        assert!(matches!(parse_trace_csv(&bad_clamp, "x"), Err(IoError::Parse { line: 2, .. })));
        let short = format!("{TRACE_HEADER}\n0,1,1\n");
        assert!(parse_trace_csv(&short, "x").is_err());
    }

    #[test]
    fn chart_has_one_polyline_per_series() {
        let series: Vec<Series> = (0..3)
            .map(|i| Series { label: format!("s{i}"), points: vec![(0.0, i as f64), (1.0, 2.0)] })
            .collect();
        let svg = svg_line_chart(&series, "step", "value");
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains(">s2</text>"));
    }

    #[test]
    fn chart_survives_degenerate_input() {
        let flat = [Series { label: "a<b".into(), points: vec![(0.0, 1.0), (0.0, 1.0), (1.0, f64::NAN)] }];
        let svg = svg_line_chart(&flat, "step", "v");
        assert!(!svg.contains("NaN"));
        assert!(svg.contains("a&lt;b"));
    }
}
