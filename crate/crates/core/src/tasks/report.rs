//! Evaluation reports and their CSV / SVG emission.
//!
//! Files written for a report with protocol `p`:
//!
//! - `p.csv`: one row per evaluated item, columns [`REPORT_COLUMNS`];
//! - `p_summary.csv`: per (axis value, topology) aggregates plus an `all`
//!   topology row per axis value, columns [`SUMMARY_COLUMNS`];
//! - `p_meta.json`: protocol, sweep axis name and model fingerprint;
//! - `p.svg` (sweeps only): denoising plots output against input error with
//!   a `y = x` reference; upsampling plots error against input-joint
//!   proportion.
//!
//! Missing values are empty cells. Numbers use the shortest round-trip
//! decimal form, so identical reports give identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Serialize;

use super::TaskError;

pub const REPORT_COLUMNS: [&str; 10] = [
    "protocol",
    "axis",
    "item",
    "topology",
    "unseen",
    "input_mpjpe_cm",
    "mpjpe_cm",
    "normalized_mpjpe",
    "kept_mpjpe_cm",
    "held_out_mpjpe_cm",
];

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "protocol",
    "axis",
    "topology",
    "unseen",
    "n",
    "mean_mpjpe_cm",
    "std_mpjpe_cm",
    "mean_input_mpjpe_cm",
    "mean_normalized_mpjpe",
    "mean_held_out_mpjpe_cm",
];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    /// Sweep value (noise level in cm, or joint proportion).
    pub axis: Option<f64>,
    pub item: String,
    pub topology: String,
    pub unseen: bool,
    pub input_mpjpe_cm: Option<f64>,
    pub mpjpe_cm: f64,
    pub normalized_mpjpe: Option<f64>,
    pub kept_mpjpe_cm: Option<f64>,
    pub held_out_mpjpe_cm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub protocol: String,
    pub axis_name: Option<String>,
    pub fingerprint: String,
    pub rows: Vec<EvalRow>,
}

/// Mean and population standard deviation over one group of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub axis: Option<f64>,
    /// Topology id, or `all`.
    pub topology: String,
    pub unseen: bool,
    pub n: usize,
    pub mean_mpjpe_cm: f64,
    pub std_mpjpe_cm: f64,
    pub mean_input_mpjpe_cm: Option<f64>,
    pub mean_normalized_mpjpe: Option<f64>,
    pub mean_held_out_mpjpe_cm: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Svg,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let vals: Option<Vec<f64>> = v.collect();
    vals.filter(|v| !v.is_empty()).map(|v| mean(&v))
}

/// Orders optional axis values with `None` first.
fn axis_key(a: Option<f64>) -> (u8, u64) {
    match a {
        None => (0, 0),
        // order-preserving map of non-negative floats
        Some(x) => (1, x.to_bits()),
    }
}

impl EvalReport {
    pub fn new(protocol: &str, axis_name: Option<&str>, fingerprint: String, rows: Vec<EvalRow>) -> Self {
        EvalReport { protocol: protocol.into(), axis_name: axis_name.map(Into::into), fingerprint, rows }
    }

    /// Distinct axis values in first-seen order.
    pub fn axis_values(&self) -> Vec<Option<f64>> {
        let mut out: Vec<Option<f64>> = Vec::new();
        for r in &self.rows {
            if !out.iter().any(|a| a.map(f64::to_bits) == r.axis.map(f64::to_bits)) {
                out.push(r.axis);
            }
        }
        out
    }

    /// Aggregates recomputed from the rows.
    pub fn aggregates(&self) -> Vec<Aggregate> {
        let mut groups: BTreeMap<((u8, u64), String), Vec<&EvalRow>> = BTreeMap::new();
        for r in &self.rows {
            groups.entry((axis_key(r.axis), r.topology.clone())).or_default().push(r);
            groups.entry((axis_key(r.axis), "\u{10FFFF}all".into())).or_default().push(r);
        }
        groups
            .into_iter()
            .map(|((_, topo), rows)| {
                let errs: Vec<f64> = rows.iter().map(|r| r.mpjpe_cm).collect();
                let m = mean(&errs);
                let var = errs.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / errs.len() as f64;
                let all = topo.starts_with('\u{10FFFF}');
                Aggregate {
                    axis: rows[0].axis,
                    topology: if all { "all".into() } else { topo },
                    unseen: !all && rows[0].unseen,
                    n: rows.len(),
                    mean_mpjpe_cm: m,
                    std_mpjpe_cm: var.sqrt(),
                    mean_input_mpjpe_cm: mean_opt(rows.iter().map(|r| r.input_mpjpe_cm)),
                    mean_normalized_mpjpe: mean_opt(rows.iter().map(|r| r.normalized_mpjpe)),
                    mean_held_out_mpjpe_cm: mean_opt(rows.iter().map(|r| r.held_out_mpjpe_cm)),
                }
            })
            .collect()
    }

    /// Overall aggregate per axis value, in axis order.
    pub fn overall(&self) -> Vec<Aggregate> {
        self.aggregates().into_iter().filter(|a| a.topology == "all").collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = REPORT_COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                self.protocol,
                num(r.axis),
                r.item,
                r.topology,
                r.unseen,
                num(r.input_mpjpe_cm),
                r.mpjpe_cm,
                num(r.normalized_mpjpe),
                num(r.kept_mpjpe_cm),
                num(r.held_out_mpjpe_cm),
            );
        }
        s
    }

    /// Parses a per-item CSV written by [`EvalReport::to_csv`].
    pub fn from_csv(text: &str, axis_name: Option<&str>, fingerprint: String) -> Result<Self, TaskError> {
        let bad = |line: usize, msg: &str| TaskError::Parameter(format!("report line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == REPORT_COLUMNS.join(",") => {}
            _ => return Err(bad(0, "unexpected header")),
        }
        let mut protocol = None;
        let mut rows = Vec::new();
        for (i, line) in lines.filter(|(_, l)| !l.is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != REPORT_COLUMNS.len() {
                return Err(bad(i, "wrong cell count"));
            }
            if *protocol.get_or_insert(cells[0]) != cells[0] {
                return Err(bad(i, "mixed protocols"));
            }
            let opt = |s: &str| -> Result<Option<f64>, TaskError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|_| bad(i, "bad number"))
                }
            };
            rows.push(EvalRow {
                axis: opt(cells[1])?,
                item: cells[2].to_string(),
                topology: cells[3].to_string(),
                unseen: cells[4].parse().map_err(|_| bad(i, "bad flag"))?,
                input_mpjpe_cm: opt(cells[5])?,
                mpjpe_cm: opt(cells[6])?.ok_or_else(|| bad(i, "missing error"))?,
                normalized_mpjpe: opt(cells[7])?,
                kept_mpjpe_cm: opt(cells[8])?,
                held_out_mpjpe_cm: opt(cells[9])?,
            });
        }
        let protocol = protocol.unwrap_or("report");
        Ok(EvalReport::new(protocol, axis_name, fingerprint, rows))
    }

    pub fn summary_csv(&self) -> String {
        let mut s = SUMMARY_COLUMNS.join(",");
        s.push('\n');
        for a in self.aggregates() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                self.protocol,
                num(a.axis),
                a.topology,
                a.unseen,
                a.n,
                a.mean_mpjpe_cm,
                a.std_mpjpe_cm,
                num(a.mean_input_mpjpe_cm),
                num(a.mean_normalized_mpjpe),
                num(a.mean_held_out_mpjpe_cm),
            );
        }
        s
    }
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
struct Meta<'a> {
    protocol: &'a str,
    axis: Option<&'a str>,
    fingerprint: &'a str,
    columns: &'a [&'a str],
    summary_columns: &'a [&'a str],
}

/// Writes the report files into `dir` and returns their paths.
pub fn emit_report(report: &EvalReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>, TaskError> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let p = &report.protocol;
    if formats.contains(&ReportFormat::Csv) {
        for (name, body) in [(format!("{p}.csv"), report.to_csv()), (format!("{p}_summary.csv"), report.summary_csv())] {
            let path = dir.join(name);
            fs::write(&path, body)?;
            written.push(path);
        }
        let meta = Meta {
            protocol: p,
            axis: report.axis_name.as_deref(),
            fingerprint: &report.fingerprint,
            columns: &REPORT_COLUMNS,
            summary_columns: &SUMMARY_COLUMNS,
        };
        let path = dir.join(format!("{p}_meta.json"));
        fs::write(&path, serde_json::to_string_pretty(&meta).map_err(|e| TaskError::Plot(e.to_string()))? + "\n")?;
        written.push(path);
    }
    if formats.contains(&ReportFormat::Svg) && report.axis_name.is_some() && !report.rows.is_empty() {
        let path = dir.join(format!("{p}.svg"));
        fs::write(&path, plot_svg(report)?)?;
        written.push(path);
    }
    Ok(written)
}

type Series = (String, Vec<(f64, f64)>, RGBColor);

fn sweep_series(report: &EvalReport) -> (String, String, Vec<Series>, bool) {
    let overall = report.overall();
    if report.protocol == "denoising" {
        let pts = overall.iter().filter_map(|a| Some((a.mean_input_mpjpe_cm?, a.mean_mpjpe_cm))).collect();
        ("input MPJPE (cm)".into(), "output MPJPE (cm)".into(), vec![("output".into(), pts, BLUE)], true)
    } else {
        let all = overall.iter().filter_map(|a| Some((a.axis?, a.mean_mpjpe_cm))).collect();
        let held = overall.iter().filter_map(|a| Some((a.axis?, a.mean_held_out_mpjpe_cm?))).collect();
        let x = report.axis_name.clone().unwrap_or_default().replace('_', " ");
        (x, "MPJPE (cm)".into(), vec![("all joints".into(), all, BLUE), ("held-out joints".into(), held, RED)], false)
    }
}

fn plot_svg(report: &EvalReport) -> Result<String, TaskError> {
    let (xlabel, ylabel, series, diagonal) = sweep_series(report);
    let pts = series.iter().flat_map(|s| s.1.iter());
    let (mut xmax, mut ymax) = (0.0f64, 0.0f64);
    for &(x, y) in pts {
        xmax = xmax.max(x);
        ymax = ymax.max(y);
    }
    if diagonal {
        xmax = xmax.max(ymax);
        ymax = xmax;
    }
    let (xmax, ymax) = ((xmax * 1.05).max(1e-6), (ymax * 1.05).max(1e-6));
    let err = |e: &dyn std::fmt::Display| TaskError::Plot(e.to_string());
    let mut buf = String::new();
    {
        let root = SVGBackend::with_string(&mut buf, (640, 480)).into_drawing_area();
        root.fill(&WHITE).map_err(|e| err(&e))?;
        let mut chart = ChartBuilder::on(&root)
            .caption(&report.protocol, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(0.0..xmax, 0.0..ymax)
            .map_err(|e| err(&e))?;
        chart.configure_mesh().x_desc(xlabel).y_desc(ylabel).draw().map_err(|e| err(&e))?;
        if diagonal {
            chart
                .draw_series(LineSeries::new([(0.0, 0.0), (xmax, xmax)], BLACK.mix(0.5)))
                .map_err(|e| err(&e))?
                .label("y = x");
        }
        for (name, pts, color) in series {
            chart.draw_series(LineSeries::new(pts.clone(), color)).map_err(|e| err(&e))?.label(name);
            chart.draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled()))).map_err(|e| err(&e))?;
        }
        chart.configure_series_labels().border_style(BLACK).background_style(WHITE).draw().map_err(|e| err(&e))?;
        root.present().map_err(|e| err(&e))?;
    }
    Ok(buf)
}
