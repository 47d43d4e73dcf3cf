//! Files exchanged with the host harness: the JSON run manifest written by
//! the executor, and the plain-text timing file written back.
//!
//! Timing file layout:
//!
//! ```text
//! # kernelforge-timing v1
//! # shape_label: [16, 4096]
//! # warmup_runs: 20
//! # timed_runs: 100
//! # host_total_us: 2113.5        (optional)
//! 20.91
//! 20.87
//! ...
//! ```
//!
//! One positive microsecond value per timed repetition; warm-up launches
//! are never listed.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::DType;

pub const HARNESS_FORMAT: &str = "kernelforge-harness/1";
pub const TIMING_HEADER: &str = "# kernelforge-timing v1";

pub const HARNESS_EXIT_MANIFEST: i32 = 10;
pub const HARNESS_EXIT_DEVICE: i32 = 11;
pub const HARNESS_EXIT_LAUNCH: i32 = 12;

/// One kernel parameter, in signature order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Binding {
    Input {
        name: String,
        path: PathBuf,
        dtype: DType,
        shape: Vec<usize>,
    },
    Output {
        name: String,
        path: PathBuf,
        dtype: DType,
        shape: Vec<usize>,
    },
    Scalar {
        name: String,
        value: f32,
    },
}

impl Binding {
    pub fn name(&self) -> &str {
        match self {
            Binding::Input { name, .. } | Binding::Output { name, .. } | Binding::Scalar { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessCase {
    pub case_id: String,
    pub bindings: Vec<Binding>,
}

/// Everything the harness needs for one shape family.
///
/// The harness launches each case once (untimed) and writes its outputs,
/// then runs `warmup_runs` + `timed_runs` launches of case
/// `timing_case` and writes the timing file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarnessManifest {
    pub format: String,
    pub kernel: String,
    pub entry: String,
    pub shape_label: String,
    /// Extents of the task's symbolic dimensions, passed to the entry.
    pub dims: Vec<usize>,
    pub warmup_runs: u32,
    pub timed_runs: u32,
    /// Either "kernel-declared" or an explicit "grid=..,block=.." string.
    pub launch: String,
    pub timing_case: usize,
    pub timing_path: PathBuf,
    pub cases: Vec<HarnessCase>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimingFile {
    pub shape_label: String,
    pub warmup_runs: u32,
    pub timed_runs: u32,
    pub host_total_us: Option<f64>,
    pub samples: Vec<f64>,
}

#[derive(Debug, Error, PartialEq)]
pub enum TimingParseError {
    #[error("missing `{TIMING_HEADER}` first line")]
    MissingHeader,
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("missing header field `{0}`")]
    MissingField(&'static str),
    #[error("shape label `{found}` does not match expected `{expected}`")]
    LabelMismatch { expected: String, found: String },
    #[error("expected {expected} timed samples, found {found}")]
    Count { expected: usize, found: usize },
}

pub fn render_timing_file(t: &TimingFile) -> String {
    let mut s = format!(
        "{TIMING_HEADER}\n# shape_label: {}\n# warmup_runs: {}\n# timed_runs: {}\n",
        t.shape_label, t.warmup_runs, t.timed_runs
    );
    if let Some(h) = t.host_total_us {
        s.push_str(&format!("# host_total_us: {h}\n"));
    }
    for v in &t.samples {
        s.push_str(&format!("{v}\n"));
    }
    s
}

/// Parses and validates a timing file. When `expected` is given, the label
/// and sample count must match it.
pub fn parse_timing_file(text: &str, expected: Option<(&str, u32)>) -> Result<TimingFile, TimingParseError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim_end() == TIMING_HEADER => {}
        _ => return Err(TimingParseError::MissingHeader),
    }
    let mut label = None;
    let mut warmup = None;
    let mut timed = None;
    let mut host = None;
    let mut samples = Vec::new();
    for (i, raw) in lines {
        let line = i + 1;
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        let bad = |message: String| TimingParseError::Line { line, message };
        if let Some(rest) = l.strip_prefix('#') {
            if !samples.is_empty() {
                return Err(bad("header field after samples".into()));
            }
            let Some((key, value)) = rest.split_once(':') else {
                return Err(bad(format!("malformed header `{l}`")));
            };
            let value = value.trim();
            let count = |v: &str| v.parse::<u32>().map_err(|e| bad(format!("{}: {e}", key.trim())));
            match key.trim() {
                "shape_label" => label = Some(value.to_string()),
                "warmup_runs" => warmup = Some(count(value)?),
                "timed_runs" => timed = Some(count(value)?),
                "host_total_us" => host = Some(value.parse::<f64>().map_err(|e| bad(format!("host_total_us: {e}")))?),
                other => return Err(bad(format!("unknown header field `{other}`"))),
            }
            continue;
        }
        let v: f64 = l.parse().map_err(|_| bad(format!("not a number: `{l}`")))?;
        if !(v.is_finite() && v > 0.0) {
            return Err(bad(format!("sample {v} is not positive and finite")));
        }
        samples.push(v);
    }
    let shape_label = label.ok_or(TimingParseError::MissingField("shape_label"))?;
    let warmup_runs = warmup.ok_or(TimingParseError::MissingField("warmup_runs"))?;
    let timed_runs = timed.ok_or(TimingParseError::MissingField("timed_runs"))?;
    if samples.len() != timed_runs as usize {
        return Err(TimingParseError::Count {
            expected: timed_runs as usize,
            found: samples.len(),
        });
    }
    if let Some((exp_label, exp_runs)) = expected {
        if shape_label != exp_label {
            return Err(TimingParseError::LabelMismatch {
                expected: exp_label.into(),
                found: shape_label,
            });
        }
        if timed_runs != exp_runs {
            return Err(TimingParseError::Count {
                expected: exp_runs as usize,
                found: timed_runs as usize,
            });
        }
    }
    Ok(TimingFile {
        shape_label,
        warmup_runs,
        timed_runs,
        host_total_us: host,
        samples,
    })
}
