//! Candidates, round records and the line-delimited optimization log.
//!
//! A log file is JSON Lines. Every line is an object with a `type` tag:
//!
//! ```text
//! {"type":"header", "format":"kernelforge-log/1", "task_name":..., "config":{...}}
//! {"type":"meta", "started_at":..., "tool_version":...}
//! {"type":"transcript", "role":"testing", "round":0, ...}
//! {"type":"record", "round":0, "code":..., "correctness":true, "performance":{...}}
//! ...
//! {"type":"error", "round":3, "kind":"backend", "message":...}   (only on abort)
//! ```
//!
//! Lines are written in round order: a round's transcripts precede its
//! record. Wall-clock data lives only in the `meta` line.

use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{CorrectnessReport, PerfReport};

pub const LOG_FORMAT: &str = "kernelforge-log/1";

/// A kernel source under evaluation. Round 0 is the baseline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub round: u32,
    pub source: String,
    pub provenance: String,
}

impl Candidate {
    pub fn baseline(source: impl Into<String>) -> Self {
        Self {
            round: 0,
            source: source.into(),
            provenance: "baseline".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentRole {
    Testing,
    Profiling,
    Planning,
    Coding,
}

impl AgentRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::Testing => "testing",
            AgentRole::Profiling => "profiling",
            AgentRole::Planning => "planning",
            AgentRole::Coding => "coding",
        }
    }
}

impl std::fmt::Display for AgentRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for AgentRole {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "testing" => Ok(AgentRole::Testing),
            "profiling" => Ok(AgentRole::Profiling),
            "planning" => Ok(AgentRole::Planning),
            "coding" => Ok(AgentRole::Coding),
            other => Err(format!("unknown agent role `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One backend exchange, recorded verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTranscript {
    pub role: AgentRole,
    pub round: u32,
    pub prompt: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
    /// Wall-clock latency; only live backends report it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    /// Transport attempts used, including the successful one.
    pub attempts: u32,
    /// Set when the exchange failed after exhausting retries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub code: String,
    pub correctness: bool,
    /// Absent when the candidate failed to compile or run.
    pub performance: Option<PerfReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<CorrectnessReport>,
    #[serde(default)]
    pub provenance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<String>,
}

impl RoundRecord {
    pub fn geo_mean(&self) -> Option<f64> {
        self.performance.as_ref().map(|p| p.geo_mean)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    pub started_at: String,
    pub tool_version: String,
}

/// Marks a run that stopped before completing all rounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunErrorMarker {
    pub round: u32,
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationLog {
    pub task_name: String,
    pub config_snapshot: serde_json::Value,
    pub metadata: RunMetadata,
    pub records: Vec<RoundRecord>,
    pub agent_transcripts: Vec<AgentTranscript>,
    pub error: Option<RunErrorMarker>,
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid log: {0}")]
    Invalid(String),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LogLine {
    Header {
        format: String,
        task_name: String,
        config: serde_json::Value,
    },
    Meta(RunMetadata),
    Transcript(AgentTranscript),
    Record(RoundRecord),
    Error(RunErrorMarker),
}

fn encode(line: &LogLine) -> String {
    serde_json::to_string(line).expect("log lines always serialize")
}

impl OptimizationLog {
    /// Checks record ordering: round 0 first and correct, rounds consecutive.
    pub fn validate(&self) -> Result<(), LogError> {
        let Some(first) = self.records.first() else {
            return Err(LogError::Invalid("log has no records".into()));
        };
        if first.round != 0 || !first.correctness {
            return Err(LogError::Invalid(
                "first record must be the correct round-0 baseline".into(),
            ));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.round as usize != i {
                return Err(LogError::Invalid(format!(
                    "record {i} has round {} (rounds must be consecutive from 0)",
                    r.round
                )));
            }
            if r.correctness && r.performance.is_none() {
                return Err(LogError::Invalid(format!(
                    "correct round {} lacks performance",
                    r.round
                )));
            }
        }
        Ok(())
    }

    /// Transcripts of one round, in order.
    pub fn transcripts_for(&self, round: u32) -> impl Iterator<Item = &AgentTranscript> {
        self.agent_transcripts.iter().filter(move |t| t.round == round)
    }

    /// Canonical line sequence for this log.
    fn lines(&self) -> Vec<String> {
        let mut out = vec![
            encode(&LogLine::Header {
                format: LOG_FORMAT.into(),
                task_name: self.task_name.clone(),
                config: self.config_snapshot.clone(),
            }),
            encode(&LogLine::Meta(self.metadata.clone())),
        ];
        let last = self.records.last().map(|r| r.round);
        for rec in &self.records {
            out.extend(
                self.transcripts_for(rec.round)
                    .map(|t| encode(&LogLine::Transcript(t.clone()))),
            );
            out.push(encode(&LogLine::Record(rec.clone())));
        }
        out.extend(
            self.agent_transcripts
                .iter()
                .filter(|t| last.is_none_or(|l| t.round > l))
                .map(|t| encode(&LogLine::Transcript(t.clone()))),
        );
        if let Some(e) = &self.error {
            out.push(encode(&LogLine::Error(e.clone())));
        }
        out
    }

    pub fn to_jsonl(&self) -> Result<String, LogError> {
        self.validate()?;
        let mut s = self.lines().join("\n");
        s.push('\n');
        Ok(s)
    }

    pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Self, LogError> {
        let mut header = None;
        let mut metadata = RunMetadata::default();
        let mut records = Vec::new();
        let mut transcripts = Vec::new();
        let mut error = None;
        for (i, line) in reader.lines().enumerate() {
            let lineno = i + 1;
            let line = line.map_err(|e| LogError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line).map_err(|e| LogError::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
            match parsed {
                LogLine::Header {
                    format,
                    task_name,
                    config,
                } => {
                    if lineno != 1 {
                        return Err(LogError::Parse {
                            line: lineno,
                            message: "header must be the first line".into(),
                        });
                    }
                    if format != LOG_FORMAT {
                        return Err(LogError::Parse {
                            line: lineno,
                            message: format!("unsupported log format `{format}`"),
                        });
                    }
                    header = Some((task_name, config));
                }
                _ if header.is_none() => {
                    return Err(LogError::Parse {
                        line: lineno,
                        message: "missing header line".into(),
                    })
                }
                LogLine::Meta(m) => metadata = m,
                LogLine::Transcript(t) => transcripts.push(t),
                LogLine::Record(r) => records.push(r),
                LogLine::Error(e) => error = Some(e),
            }
        }
        let (task_name, config_snapshot) = header.ok_or_else(|| LogError::Invalid("empty log".into()))?;
        let log = Self {
            task_name,
            config_snapshot,
            metadata,
            records,
            agent_transcripts: transcripts,
            error,
        };
        log.validate()?;
        Ok(log)
    }
}

/// Writes `log` atomically (temp file then rename). Rejects invalid logs.
pub fn save_log(log: &OptimizationLog, path: &Path) -> Result<(), LogError> {
    let text = log.to_jsonl()?;
    let io_err = |source| LogError::Io {
        path: path.to_path_buf(),
        source,
    };
    let tmp = path.with_extension("jsonl.tmp");
    std::fs::write(&tmp, text).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_log(path: &Path) -> Result<OptimizationLog, LogError> {
    let f = File::open(path).map_err(|source| LogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    OptimizationLog::from_jsonl(BufReader::new(f))
}

/// Appends log lines as a run progresses, flushing after every round so an
/// interrupted run leaves a loadable prefix.
pub struct LogWriter {
    file: File,
    path: PathBuf,
}

impl LogWriter {
    pub fn create(
        path: &Path,
        task_name: &str,
        config: &serde_json::Value,
        metadata: &RunMetadata,
    ) -> Result<Self, LogError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|source| LogError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let mut w = Self {
            file,
            path: path.to_path_buf(),
        };
        w.write_lines(&[
            LogLine::Header {
                format: LOG_FORMAT.into(),
                task_name: task_name.into(),
                config: config.clone(),
            },
            LogLine::Meta(metadata.clone()),
        ])?;
        Ok(w)
    }

    fn write_lines(&mut self, lines: &[LogLine]) -> Result<(), LogError> {
        let mut buf = String::new();
        for l in lines {
            buf.push_str(&encode(l));
            buf.push('\n');
        }
        let io_err = |source| LogError::Io {
            path: self.path.clone(),
            source,
        };
        self.file.write_all(buf.as_bytes()).map_err(io_err)?;
        self.file.flush().map_err(io_err)?;
        self.file.sync_data().map_err(io_err)
    }

    pub fn append_round(&mut self, transcripts: &[AgentTranscript], record: &RoundRecord) -> Result<(), LogError> {
        let mut lines: Vec<LogLine> = transcripts.iter().cloned().map(LogLine::Transcript).collect();
        lines.push(LogLine::Record(record.clone()));
        self.write_lines(&lines)
    }

    pub fn append_error(&mut self, transcripts: &[AgentTranscript], marker: &RunErrorMarker) -> Result<(), LogError> {
        let mut lines: Vec<LogLine> = transcripts.iter().cloned().map(LogLine::Transcript).collect();
        lines.push(LogLine::Error(marker.clone()));
        self.write_lines(&lines)
    }
}
