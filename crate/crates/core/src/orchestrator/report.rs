//! Run summaries and their text, markdown and CSV renderings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::select_best;
use crate::log::OptimizationLog;
use crate::metrics::{arithmetic_mean, geo_mean, FailureKind, ShapePerf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Text,
    Md,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "md" | "markdown" => Ok(ReportFormat::Md),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRow {
    pub round: u32,
    pub correct: bool,
    pub geo_mean: Option<f64>,
    pub note: String,
    pub per_shape: Vec<ShapePerf>,
}

/// One kernel's line in a cross-kernel table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelRow {
    pub name: String,
    pub loc_base: usize,
    pub loc_opt: usize,
    pub loc_delta_pct: f64,
    pub time_base_us: f64,
    pub time_opt_us: f64,
    pub speedup: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task_name: String,
    pub best_round: u32,
    pub rounds: Vec<RoundRow>,
    pub best_per_shape: Vec<ShapePerf>,
    pub kernel: KernelRow,
    /// Set when the run stopped before its last round.
    pub aborted: Option<String>,
}

/// Lines containing anything besides whitespace.
pub fn non_blank_lines(source: &str) -> usize {
    source.lines().filter(|l| !l.trim().is_empty()).count()
}

fn round_note(r: &crate::log::RoundRecord) -> String {
    if r.round == 0 {
        return "baseline".into();
    }
    if r.provenance == "agent-failure" {
        return "agent failure".into();
    }
    match r.report.as_ref().map(|c| c.failure_kind) {
        Some(FailureKind::Compile) => "compile error".into(),
        Some(FailureKind::Runtime) => "runtime error".into(),
        Some(FailureKind::Mismatch) => "incorrect output".into(),
        _ => String::new(),
    }
}

pub fn summarize(log: &OptimizationLog) -> RunSummary {
    let best = select_best(log);
    let base = &log.records[0];
    let rounds = log
        .records
        .iter()
        .map(|r| RoundRow {
            round: r.round,
            correct: r.correctness,
            geo_mean: r.geo_mean(),
            note: round_note(r),
            per_shape: r.performance.as_ref().map(|p| p.per_shape.clone()).unwrap_or_default(),
        })
        .collect();
    let best_per_shape = best
        .performance
        .as_ref()
        .map(|p| p.per_shape.clone())
        .unwrap_or_default();
    let loc_base = non_blank_lines(&base.code);
    let loc_opt = non_blank_lines(&best.code);
    let mean_of = |f: fn(&ShapePerf) -> f64| {
        arithmetic_mean(&best_per_shape.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN)
    };
    let kernel = KernelRow {
        name: log.task_name.clone(),
        loc_base,
        loc_opt,
        loc_delta_pct: if loc_base == 0 {
            0.0
        } else {
            100.0 * (loc_opt as f64 - loc_base as f64) / loc_base as f64
        },
        time_base_us: mean_of(|s| s.baseline_us),
        time_opt_us: mean_of(|s| s.candidate_us),
        speedup: best.geo_mean().unwrap_or(1.0),
        correct: best.correctness,
    };
    RunSummary {
        task_name: log.task_name.clone(),
        best_round: best.round,
        rounds,
        best_per_shape,
        kernel,
        aborted: log
            .error
            .as_ref()
            .map(|e| format!("round {}: {} ({})", e.round, e.message, e.kind)),
    }
}

/// Average row over kernels: geometric mean for speedup, arithmetic mean
/// for line counts and times.
pub fn average_row(rows: &[KernelRow]) -> Option<KernelRow> {
    if rows.is_empty() {
        return None;
    }
    let mean = |f: fn(&KernelRow) -> f64| arithmetic_mean(&rows.iter().map(f).collect::<Vec<_>>()).unwrap();
    let speedups: Vec<f64> = rows.iter().map(|r| r.speedup).collect();
    Some(KernelRow {
        name: "Average".into(),
        loc_base: mean(|r| r.loc_base as f64).round() as usize,
        loc_opt: mean(|r| r.loc_opt as f64).round() as usize,
        loc_delta_pct: mean(|r| r.loc_delta_pct),
        time_base_us: mean(|r| r.time_base_us),
        time_opt_us: mean(|r| r.time_opt_us),
        speedup: geo_mean(&speedups).unwrap_or(f64::NAN),
        correct: rows.iter().all(|r| r.correct),
    })
}

const AVERAGE_NOTE: &str =
    "Average speedup is the geometric mean of per-kernel speedups; line counts and times are arithmetic means.";

fn tick(ok: bool) -> &'static str {
    if ok {
        "✓"
    } else {
        "✗"
    }
}

fn fmt_geo(g: Option<f64>) -> String {
    g.map_or("-".into(), |g| format!("{g:.2}×"))
}

fn kernel_cells(k: &KernelRow) -> [String; 8] {
    [
        k.name.clone(),
        k.loc_base.to_string(),
        k.loc_opt.to_string(),
        format!("{:+.0}%", k.loc_delta_pct),
        format!("{:.1}", k.time_base_us),
        format!("{:.1}", k.time_opt_us),
        format!("{:.2}×", k.speedup),
        tick(k.correct).into(),
    ]
}

const KERNEL_HEADER: [&str; 8] = [
    "Kernel",
    "LoC-Base",
    "LoC-Opt.",
    "ΔLoC",
    "Time-Base",
    "Time-Opt.",
    "Speedup",
    "Correct",
];

/// Left-aligned columns padded to the widest cell.
fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let width = |s: &str| s.chars().count();
    let mut w: Vec<usize> = header.iter().map(|h| width(h)).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            w[i] = w[i].max(width(c));
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            s.push_str(c);
            if i + 1 < cells.len() {
                s.push_str(&" ".repeat(w[i] - width(c) + 2));
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

fn md_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = format!("| {} |\n|{}\n", header.join(" | "), "---|".repeat(header.len()));
    for r in rows {
        let _ = writeln!(out, "| {} |", r.join(" | "));
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn render_csv(summaries: &[RunSummary]) -> String {
    let mut out = String::from("task,round,correct,shape,baseline_us,candidate_us,speedup,geo_mean\n");
    for s in summaries {
        for r in &s.rounds {
            let geo = r.geo_mean.map_or(String::new(), |g| g.to_string());
            if r.per_shape.is_empty() {
                let _ = writeln!(out, "{},{},{},,,,,{}", csv_field(&s.task_name), r.round, r.correct, geo);
            }
            for p in &r.per_shape {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    csv_field(&s.task_name),
                    r.round,
                    r.correct,
                    csv_field(&p.label),
                    p.baseline_us,
                    p.candidate_us,
                    p.speedup,
                    geo
                );
            }
        }
    }
    out
}

/// Renders per-round and per-shape tables for each run, then a
/// cross-kernel table with an Average row.
pub fn render_report(summaries: &[RunSummary], format: ReportFormat) -> String {
    if format == ReportFormat::Csv {
        return render_csv(summaries);
    }
    let table = |h: &[&str], rows: &[Vec<String>]| match format {
        ReportFormat::Md => md_table(h, rows),
        _ => text_table(h, rows),
    };
    let mut out = String::new();
    for s in summaries {
        match format {
            ReportFormat::Md => {
                let _ = writeln!(out, "## {}\n", s.task_name);
            }
            _ => {
                let _ = writeln!(out, "== {} ==", s.task_name);
            }
        }
        let rounds: Vec<Vec<String>> = s
            .rounds
            .iter()
            .map(|r| {
                vec![
                    r.round.to_string(),
                    tick(r.correct).into(),
                    fmt_geo(r.geo_mean),
                    r.note.clone(),
                ]
            })
            .collect();
        out.push_str(&table(&["Round", "Correct", "Geo-mean", "Note"], &rounds));
        if let Some(a) = &s.aborted {
            let _ = writeln!(out, "\nrun aborted at {a}");
        }
        let _ = writeln!(out, "\nSelected round {} per shape (μs):", s.best_round);
        if format == ReportFormat::Md {
            out.push('\n');
        }
        let shapes: Vec<Vec<String>> = s
            .best_per_shape
            .iter()
            .map(|p| {
                vec![
                    p.label.clone(),
                    format!("{:.1}", p.baseline_us),
                    format!("{:.1}", p.candidate_us),
                    format!("{:.2}×", p.speedup),
                ]
            })
            .collect();
        out.push_str(&table(&["Shape", "Base", "Opt.", "Speedup"], &shapes));
        out.push('\n');
    }
    let mut rows: Vec<Vec<String>> = summaries.iter().map(|s| kernel_cells(&s.kernel).to_vec()).collect();
    let kernels: Vec<KernelRow> = summaries.iter().map(|s| s.kernel.clone()).collect();
    if let Some(avg) = average_row(&kernels) {
        rows.push(kernel_cells(&avg).to_vec());
    }
    out.push_str(&table(&KERNEL_HEADER, &rows));
    let _ = writeln!(out, "\n{AVERAGE_NOTE}");
    out
}
