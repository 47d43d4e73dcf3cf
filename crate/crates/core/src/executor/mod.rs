//! Compiling, running and timing candidates against a test suite.
//!
//! Two backends implement [`Executor`]: [`SimulatedExecutor`] maps source
//! hashes to CPU behaviors and declared latencies; [`SubprocessExecutor`]
//! drives an external compiler and the host harness.

mod harness;
mod sim;
mod subprocess;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::log::Candidate;
use crate::metrics::{MetricError, PerfReport, TimingMap};
use crate::suite::{Outputs, TestSuite};
use crate::task::KernelTask;

pub use harness::{
    parse_timing_file, render_timing_file, Binding, HarnessCase, HarnessManifest, TimingFile, TimingParseError,
    HARNESS_EXIT_DEVICE, HARNESS_EXIT_LAUNCH, HARNESS_EXIT_MANIFEST, HARNESS_FORMAT, TIMING_HEADER,
};
pub use sim::{Behavior, LatencyModel, SimEntry, SimEntryConfig, SimulatedConfig, SimulatedExecutor};
pub use subprocess::{SubprocessConfig, SubprocessExecutor};

/// Warm-up and timed repetition counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimingProtocol {
    pub warmup_runs: u32,
    pub timed_runs: u32,
}

impl Default for TimingProtocol {
    fn default() -> Self {
        Self {
            warmup_runs: 20,
            timed_runs: 100,
        }
    }
}

impl TimingProtocol {
    pub fn validate(&self) -> Result<(), ExecError> {
        if self.timed_runs == 0 {
            return Err(ExecError::Config("timed_runs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    CompileError,
    RuntimeError,
    Timeout,
}

impl std::fmt::Display for RunStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RunStatus::Ok => "ok",
            RunStatus::CompileError => "compile_error",
            RunStatus::RuntimeError => "runtime_error",
            RunStatus::Timeout => "timeout",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub status: RunStatus,
    /// Outputs per case id. Empty unless `status` is ok.
    pub outputs: BTreeMap<String, Outputs>,
    /// Timed repetition samples per shape label, in microseconds.
    pub timings: TimingMap,
    pub diagnostics: String,
}

impl RunOutcome {
    pub fn failure(status: RunStatus, diagnostics: impl Into<String>) -> Self {
        Self {
            status,
            outputs: BTreeMap::new(),
            timings: TimingMap::new(),
            diagnostics: diagnostics.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("executor configuration: {0}")]
    Config(String),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{which} run did not succeed ({}): {}", outcome.status, outcome.diagnostics)]
    Profiling {
        which: &'static str,
        outcome: Box<RunOutcome>,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExecError + '_ {
    move |source| ExecError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub trait Executor: Send + Sync {
    /// Runs every case of `suite` once for outputs, then times each shape
    /// family under `protocol`.
    fn execute_suite(
        &self,
        candidate: &Candidate,
        suite: &TestSuite,
        task: &KernelTask,
        protocol: &TimingProtocol,
    ) -> Result<RunOutcome, ExecError>;
}

/// Stable digest of kernel source text. Whitespace is significant.
pub fn hash_source(source: &str) -> String {
    crate::digest::sha256_hex(source.as_bytes())
}

/// Builds a performance report from baseline timings and a candidate
/// outcome, over the suite's shape labels.
pub fn perf_from_timings(
    suite: &TestSuite,
    baseline: &TimingMap,
    candidate: &TimingMap,
) -> Result<PerfReport, ExecError> {
    Ok(PerfReport::compute(&suite.shape_labels(), baseline, candidate)?)
}

/// Runs both candidates under the same protocol and compares their timings.
pub fn profile_pair(
    exec: &dyn Executor,
    baseline: &Candidate,
    candidate: &Candidate,
    suite: &TestSuite,
    task: &KernelTask,
    protocol: &TimingProtocol,
) -> Result<PerfReport, ExecError> {
    let base = exec.execute_suite(baseline, suite, task, protocol)?;
    if !base.is_ok() {
        return Err(ExecError::Profiling {
            which: "baseline",
            outcome: Box::new(base),
        });
    }
    let cand = exec.execute_suite(candidate, suite, task, protocol)?;
    if !cand.is_ok() {
        return Err(ExecError::Profiling {
            which: "candidate",
            outcome: Box::new(cand),
        });
    }
    perf_from_timings(suite, &base.timings, &cand.timings)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecKind {
    Simulated,
    Subprocess,
}

/// Executor section of a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecBackendConfig {
    pub kind: ExecKind,
    #[serde(default = "default_work_dir")]
    pub work_dir: PathBuf,
    #[serde(default = "default_timeout_s")]
    pub compile_timeout_s: f64,
    #[serde(default = "default_timeout_s")]
    pub run_timeout_s: f64,
    #[serde(default)]
    pub simulated: Option<SimulatedConfig>,
    #[serde(default)]
    pub subprocess: Option<SubprocessConfig>,
}

fn default_work_dir() -> PathBuf {
    PathBuf::from("kernelforge-work")
}

fn default_timeout_s() -> f64 {
    300.0
}

impl ExecBackendConfig {
    pub fn simulated(sim: SimulatedConfig) -> Self {
        Self {
            kind: ExecKind::Simulated,
            work_dir: default_work_dir(),
            compile_timeout_s: default_timeout_s(),
            run_timeout_s: default_timeout_s(),
            simulated: Some(sim),
            subprocess: None,
        }
    }

    pub fn validate(&self) -> Result<(), ExecError> {
        let ok = |t: f64| t.is_finite() && t > 0.0;
        if !ok(self.compile_timeout_s) || !ok(self.run_timeout_s) {
            return Err(ExecError::Config("timeouts must be positive".into()));
        }
        match self.kind {
            ExecKind::Simulated if self.simulated.is_none() => Err(ExecError::Config(
                "kind = \"simulated\" needs an [executor.simulated] section".into(),
            )),
            ExecKind::Subprocess if self.subprocess.is_none() => Err(ExecError::Config(
                "kind = \"subprocess\" needs an [executor.subprocess] section".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn compile_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.compile_timeout_s)
    }

    pub fn run_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.run_timeout_s)
    }

    /// Instantiates the configured backend. Relative paths resolve against
    /// `base_dir` (the directory of the config file).
    pub fn build(&self, base_dir: &Path) -> Result<Box<dyn Executor>, ExecError> {
        self.validate()?;
        match self.kind {
            ExecKind::Simulated => {
                let sim = self.simulated.as_ref().expect("validated");
                Ok(Box::new(SimulatedExecutor::from_config(sim, base_dir)?))
            }
            ExecKind::Subprocess => {
                let sub = self.subprocess.as_ref().expect("validated");
                let work = base_dir.join(&self.work_dir);
                Ok(Box::new(SubprocessExecutor::new(
                    sub.resolved(base_dir),
                    work,
                    self.compile_timeout(),
                    self.run_timeout(),
                )))
            }
        }
    }
}
