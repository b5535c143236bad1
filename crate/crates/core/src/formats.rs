//! Text formats: snapshot reports and measurement files.
//!
//! Snapshot report CSV columns:
//!
//! ```text
//! snapshot,bus,v_true_pu,v_est_pu,angle_true_deg,angle_est_deg,iterations,objective,converged
//! ```
//!
//! Voltages and angles carry exactly four decimals. Snapshots that failed
//! contribute no rows; the JSON form records their error.
//!
//! Measurement CSV columns are `kind,location,end,value,sigma` (plans omit
//! `value`). `kind` is one of `v`, `p_inj`, `q_inj`, `p_flow`, `q_flow`;
//! `location` is the bus id or 1-based branch number; `end` is `from`/`to`
//! for flows and empty otherwise.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measurement::{BranchEnd, Measurement, MeasurementKind, PlanEntry};
use crate::scenario::SnapshotReport;

pub const REPORT_HEADER: &str =
    "snapshot,bus,v_true_pu,v_est_pu,angle_true_deg,angle_est_deg,iterations,objective,converged";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{file}:{line}: {reason}")]
    Parse {
        file: String,
        line: u64,
        reason: String,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Four-decimal rendering with negative zero folded to `0.0000`.
pub fn fixed4(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".to_string()
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub snapshot: usize,
    pub bus: usize,
    pub v_true_pu: f64,
    pub v_est_pu: f64,
    pub angle_true_deg: f64,
    pub angle_est_deg: f64,
    pub iterations: usize,
    pub objective: f64,
    pub converged: bool,
}

/// Flattened per-bus rows of every completed snapshot.
pub fn report_rows(report: &SnapshotReport) -> Vec<ReportRow> {
    let mut rows = Vec::new();
    for snap in &report.snapshots {
        let (Some(truth), Some(est)) = (&snap.truth, &snap.estimate) else {
            continue;
        };
        if snap.error.is_some() {
            continue;
        }
        for bus in 0..truth.len() {
            rows.push(ReportRow {
                snapshot: snap.index,
                bus: bus + 1,
                v_true_pu: truth.magnitudes[bus],
                v_est_pu: est.magnitudes[bus],
                angle_true_deg: truth.angles[bus].to_degrees(),
                angle_est_deg: est.angles[bus].to_degrees(),
                iterations: snap.iterations,
                objective: snap.objective.unwrap_or(f64::NAN),
                converged: snap.converged,
            });
        }
    }
    rows
}

pub fn render_report_csv(report: &SnapshotReport) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in report_rows(report) {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6e},{}",
            r.snapshot,
            r.bus,
            fixed4(r.v_true_pu),
            fixed4(r.v_est_pu),
            fixed4(r.angle_true_deg),
            fixed4(r.angle_est_deg),
            r.iterations,
            r.objective,
            r.converged
        );
    }
    out
}

#[derive(Serialize)]
struct JsonReport<'a> {
    rows: Vec<ReportRow>,
    snapshots: &'a SnapshotReport,
}

pub fn render_report_json(report: &SnapshotReport) -> String {
    let doc = JsonReport {
        rows: report_rows(report),
        snapshots: report,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
    s.push('\n');
    s
}

pub fn render_report(report: &SnapshotReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => render_report_csv(report),
        ReportFormat::Json => render_report_json(report),
    }
}

pub fn emit_report(report: &SnapshotReport, format: ReportFormat, out: &Path) -> Result<(), FormatError> {
    write_text(out, &render_report(report, format))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), FormatError> {
    fs::write(path, text).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn end_str(kind: &MeasurementKind) -> &'static str {
    match kind.end() {
        Some(BranchEnd::From) => "from",
        Some(BranchEnd::To) => "to",
        None => "",
    }
}

pub fn render_measurements_csv(measurements: &[Measurement]) -> String {
    let mut out = String::from("kind,location,end,value,sigma\n");
    for m in measurements {
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?}",
            m.kind.tag(),
            m.kind.location(),
            end_str(&m.kind),
            m.value,
            m.sigma
        );
    }
    out
}

pub fn render_plan_csv(plan: &[PlanEntry]) -> String {
    let mut out = String::from("kind,location,end,sigma\n");
    for e in plan {
        let _ = writeln!(out, "{},{},{},{:?}", e.kind.tag(), e.kind.location(), end_str(&e.kind), e.sigma);
    }
    out
}

fn parse_rows(file: &str, text: &str, with_value: bool) -> Result<Vec<(MeasurementKind, f64, f64)>, FormatError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let expected: &[&str] = if with_value {
        &["kind", "location", "end", "value", "sigma"]
    } else {
        &["kind", "location", "end", "sigma"]
    };
    let bad = |line: u64, reason: String| FormatError::Parse {
        file: file.to_string(),
        line,
        reason,
    };
    let headers = rdr.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != expected {
        return Err(bad(1, format!("expected header `{}`", expected.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let location: usize = rec[1]
            .parse()
            .map_err(|_| bad(line, format!("bad location `{}`", &rec[1])))?;
        let end = match &rec[2] {
            "" => None,
            "from" => Some(BranchEnd::From),
            "to" => Some(BranchEnd::To),
            other => return Err(bad(line, format!("bad branch end `{other}`"))),
        };
        let kind = MeasurementKind::from_parts(&rec[0], location, end)
            .ok_or_else(|| bad(line, format!("bad measurement kind `{}` / end `{}`", &rec[0], &rec[2])))?;
        let num = |s: &str| -> Result<f64, FormatError> {
            s.parse().map_err(|_| bad(line, format!("`{s}` is not a number")))
        };
        let (value, sigma) = if with_value {
            (num(&rec[3])?, num(&rec[4])?)
        } else {
            (f64::NAN, num(&rec[3])?)
        };
        out.push((kind, value, sigma));
    }
    Ok(out)
}

/// Parse a measurement CSV. Reference checks happen when the rows are
/// turned into a [`MeasurementSet`](crate::measurement::MeasurementSet).
pub fn parse_measurements_csv(file: &str, text: &str) -> Result<Vec<Measurement>, FormatError> {
    Ok(parse_rows(file, text, true)?
        .into_iter()
        .map(|(kind, value, sigma)| Measurement { kind, value, sigma })
        .collect())
}

pub fn parse_plan_csv(file: &str, text: &str) -> Result<Vec<PlanEntry>, FormatError> {
    Ok(parse_rows(file, text, false)?
        .into_iter()
        .map(|(kind, _, sigma)| PlanEntry { kind, sigma })
        .collect())
}
