//! The round loop: build the suite, profile the baseline, then repeat
//! suggest, apply, validate, profile and append for the configured number
//! of rounds.

mod config;
mod report;

use std::path::Path;

use thiserror::Error;
use tracing::{info, warn};

pub use config::{AgentKind, AgentsConfig, CorrectnessConfig, OutputConfig, RunConfig, TestingConfig};
pub use report::{non_blank_lines, render_report, summarize, KernelRow, ReportFormat, RoundRow, RunSummary};

use crate::agents::{
    profile_outcome, validate_outcome, AgentError, AgentTeam, LlmBackend, PlanContext, Script, ScriptedBackend,
    TestingOptions,
};
use crate::executor::{ExecError, Executor, RunOutcome, TimingProtocol};
use crate::log::{Candidate, LogError, LogWriter, OptimizationLog, RoundRecord, RunErrorMarker, RunMetadata};
use crate::metrics::{CorrectnessReport, FailureKind, PerfReport, TimingMap};
use crate::oracles::{default_task_epsilon, OracleError, OracleRegistry};
use crate::suite::TestSuite;
use crate::task::KernelTask;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("agent backend: {0}")]
    Agent(#[from] AgentError),
    #[error("executor: {0}")]
    Executor(#[from] ExecError),
    #[error("baseline rejected: {0}")]
    Baseline(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("log: {0}")]
    Log(#[from] LogError),
}

impl OrchestratorError {
    /// Short classifier stored in error markers.
    pub fn kind(&self) -> &'static str {
        match self {
            OrchestratorError::Config(_) => "config",
            OrchestratorError::Agent(AgentError::Config(_)) => "config",
            OrchestratorError::Agent(AgentError::Scripting { .. }) => "scripting",
            OrchestratorError::Agent(_) => "backend",
            OrchestratorError::Executor(_) | OrchestratorError::Baseline(_) => "executor",
            OrchestratorError::Oracle(_) => "oracle",
            OrchestratorError::Log(_) => "log",
        }
    }
}

/// A run that stopped early. `partial` holds the completed rounds when at
/// least the baseline record exists.
#[derive(Debug)]
pub struct RunFailure {
    pub error: OrchestratorError,
    pub partial: Option<Box<OptimizationLog>>,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {}

impl From<OrchestratorError> for RunFailure {
    fn from(error: OrchestratorError) -> Self {
        Self { error, partial: None }
    }
}

/// Builds the agent team described by `cfg`.
pub fn build_team(cfg: &RunConfig) -> Result<AgentTeam, OrchestratorError> {
    let backend: Box<dyn crate::agents::ChatBackend> = match cfg.agents.kind {
        AgentKind::Scripted => {
            let path = cfg
                .agents
                .script
                .as_ref()
                .ok_or_else(|| OrchestratorError::Config("scripted agents need agents.script".into()))?;
            Box::new(ScriptedBackend::new(Script::load(path)?))
        }
        AgentKind::Llm => Box::new(LlmBackend::from_env(cfg.agents.llm.clone().unwrap_or_default())?),
    };
    Ok(AgentTeam::new(backend, cfg.mode).with_parse_retries(cfg.agents.parse_retries))
}

/// Tolerance in effect for `task` under `cfg`.
pub fn effective_epsilon(cfg: &RunConfig, task: &KernelTask) -> f64 {
    cfg.correctness.epsilon.unwrap_or_else(|| default_task_epsilon(task))
}

fn outcome_diagnostics(outcome: &RunOutcome, report: &CorrectnessReport, suite: &TestSuite) -> Option<String> {
    let mut parts = Vec::new();
    if !outcome.diagnostics.trim().is_empty() {
        parts.push(outcome.diagnostics.trim_end().to_string());
    }
    if report.failure_kind == FailureKind::Mismatch {
        let mut s = format!(
            "max discrepancy {} exceeds tolerance {}",
            report.max_discrepancy, suite.epsilon
        );
        if let Some(c) = &report.worst_case {
            s.push_str(&format!(" (worst case {c})"));
        }
        if let Some(d) = &report.detail {
            s.push_str(&format!("; {d}"));
        }
        parts.push(s);
    }
    (!parts.is_empty()).then(|| parts.join("\n"))
}

struct Sink<'a> {
    writer: Option<LogWriter>,
    log: &'a mut OptimizationLog,
}

impl Sink<'_> {
    fn push(&mut self, transcripts: Vec<crate::log::AgentTranscript>, record: RoundRecord) -> Result<(), LogError> {
        if let Some(w) = &mut self.writer {
            w.append_round(&transcripts, &record)?;
        }
        self.log.agent_transcripts.extend(transcripts);
        self.log.records.push(record);
        Ok(())
    }

    fn abort(&mut self, transcripts: Vec<crate::log::AgentTranscript>, round: u32, error: &OrchestratorError) {
        let marker = RunErrorMarker {
            round,
            kind: error.kind().into(),
            message: error.to_string(),
        };
        if let Some(w) = &mut self.writer {
            if let Err(e) = w.append_error(&transcripts, &marker) {
                warn!(target: "kernelforge::orchestrator", "could not write error marker: {e}");
            }
        }
        self.log.agent_transcripts.extend(transcripts);
        self.log.error = Some(marker);
    }
}

/// Runs the optimization loop for `task`.
///
/// The log gains one record per round and, when `log_path` is given, is
/// flushed to disk after each. A fatal error at round r leaves records
/// `0..r` plus an error marker.
pub fn optimize(
    task: &KernelTask,
    cfg: &RunConfig,
    exec: &dyn Executor,
    team: &mut AgentTeam,
    registry: &OracleRegistry,
    log_path: Option<&Path>,
    metadata: RunMetadata,
) -> Result<OptimizationLog, RunFailure> {
    cfg.validate()?;
    registry.check_task(task).map_err(OrchestratorError::from)?;
    let snapshot = cfg.snapshot();
    let writer = match log_path {
        Some(p) => Some(LogWriter::create(p, &task.name, &snapshot, &metadata).map_err(OrchestratorError::from)?),
        None => None,
    };
    let mut log = OptimizationLog {
        task_name: task.name.clone(),
        config_snapshot: snapshot,
        metadata,
        records: Vec::new(),
        agent_transcripts: Vec::new(),
        error: None,
    };
    let mut sink = Sink { writer, log: &mut log };
    match run_rounds(task, cfg, exec, team, registry, &mut sink) {
        Ok(()) => Ok(log),
        Err((round, error)) => {
            let transcripts = team.take_transcripts();
            sink.abort(transcripts, round, &error);
            let partial = (!log.records.is_empty()).then(|| Box::new(log));
            Err(RunFailure { error, partial })
        }
    }
}

fn run_rounds(
    task: &KernelTask,
    cfg: &RunConfig,
    exec: &dyn Executor,
    team: &mut AgentTeam,
    registry: &OracleRegistry,
    sink: &mut Sink<'_>,
) -> Result<(), (u32, OrchestratorError)> {
    let mut opts = TestingOptions::new(effective_epsilon(cfg, task));
    opts.metric = cfg.metric();
    opts.element_budget = cfg.testing.element_budget;
    opts.default_seeds = cfg.testing.default_seeds.clone();
    opts.seed_offset = cfg.testing.seed;

    // Suite, baseline profile and the round-0 record.
    let baseline = Candidate::baseline(task.baseline_source.clone());
    let (suite, plan) = team
        .generate_tests(&baseline, task, &opts, registry)
        .map_err(|e| (0, e.into()))?;
    info!(target: "kernelforge::orchestrator", "{}: {} cases over {} shapes", task.name, suite.cases().len(), plan.families.len());
    let protocol: TimingProtocol = cfg.timing;
    let base_out = exec
        .execute_suite(&baseline, &suite, task, &protocol)
        .map_err(|e| (0, e.into()))?;
    let base_report = validate_outcome(&base_out, &suite);
    if !base_report.passed {
        let why = base_report
            .detail
            .clone()
            .unwrap_or_else(|| format!("{:?}", base_report.failure_kind));
        return Err((
            0,
            OrchestratorError::Baseline(format!(
                "baseline does not match the oracle (max discrepancy {}): {why}",
                base_report.max_discrepancy
            )),
        ));
    }
    let base_timings: TimingMap = base_out.timings.clone();
    let perf0 = profile_outcome(&base_out, &base_timings, &suite)
        .ok_or_else(|| (0, OrchestratorError::Baseline("baseline timings incomplete".into())))?;
    let record0 = RoundRecord {
        round: 0,
        code: baseline.source.clone(),
        correctness: true,
        performance: Some(perf0.clone()),
        report: Some(base_report),
        provenance: baseline.provenance.clone(),
        diagnostics: Some(plan.describe()),
    };
    sink.push(team.take_transcripts(), record0).map_err(|e| (0, e.into()))?;

    let mut prev = baseline;
    let mut pass_prev = true;
    let mut perf_prev: Option<PerfReport> = Some(perf0);
    let mut diag_prev: Option<String> = None;

    for round in 1..=cfg.rounds {
        let history = sink.log.records.clone();
        let ctx = PlanContext {
            round,
            prev: &prev,
            pass_prev,
            perf_prev: perf_prev.as_ref(),
            diagnostics: diag_prev.as_deref(),
            history: &history,
        };
        let attempt = team
            .suggest(task, &ctx)
            .and_then(|s| team.apply(task, round, &prev, &s));
        let cand = match attempt {
            Ok(c) => c,
            Err(e) if e.is_fatal() => return Err((round, e.into())),
            Err(e) => {
                // Agent failure: the round is recorded as failed and the
                // previous candidate stays current.
                warn!(target: "kernelforge::orchestrator", "round {round}: agent failure: {e}");
                let record = RoundRecord {
                    round,
                    code: String::new(),
                    correctness: false,
                    performance: None,
                    report: None,
                    provenance: "agent-failure".into(),
                    diagnostics: Some(e.to_string()),
                };
                sink.push(team.take_transcripts(), record)
                    .map_err(|e| (round, e.into()))?;
                continue;
            }
        };

        // One execution feeds both validation and profiling.
        let outcome = exec
            .execute_suite(&cand, &suite, task, &protocol)
            .map_err(|e| (round, e.into()))?;
        let report = validate_outcome(&outcome, &suite);
        let perf = profile_outcome(&outcome, &base_timings, &suite);
        let diagnostics = outcome_diagnostics(&outcome, &report, &suite);
        info!(
            target: "kernelforge::orchestrator",
            "round {round}: {} correct={} geo_mean={:?}",
            outcome.status, report.passed, perf.as_ref().map(|p| p.geo_mean)
        );
        let record = RoundRecord {
            round,
            code: cand.source.clone(),
            correctness: report.passed,
            performance: perf.clone(),
            report: Some(report.clone()),
            provenance: cand.provenance.clone(),
            diagnostics: diagnostics.clone(),
        };
        sink.push(team.take_transcripts(), record)
            .map_err(|e| (round, e.into()))?;

        // The newest candidate is carried forward even when it failed.
        prev = cand;
        pass_prev = report.passed;
        perf_prev = perf;
        diag_prev = diagnostics;
    }
    Ok(())
}

/// The correct record with the highest geometric-mean speedup; earliest
/// round wins ties. Record 0 always qualifies.
pub fn select_best(log: &OptimizationLog) -> &RoundRecord {
    let mut best: Option<(&RoundRecord, f64)> = None;
    for r in &log.records {
        if !r.correctness {
            continue;
        }
        let Some(g) = r.geo_mean() else { continue };
        if best.is_none_or(|(_, bg)| g > bg) {
            best = Some((r, g));
        }
    }
    best.map(|(r, _)| r).unwrap_or(&log.records[0])
}

/// Correctness and performance of one candidate against a baseline.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub baseline: RunOutcome,
    pub candidate: RunOutcome,
    pub report: CorrectnessReport,
    pub performance: Option<PerfReport>,
}

/// Runs baseline and candidate over `suite` and compares them.
pub fn evaluate(
    task: &KernelTask,
    baseline: &Candidate,
    candidate: &Candidate,
    suite: &TestSuite,
    exec: &dyn Executor,
    protocol: &TimingProtocol,
) -> Result<Evaluation, OrchestratorError> {
    let base = exec.execute_suite(baseline, suite, task, protocol)?;
    if !base.is_ok() {
        return Err(OrchestratorError::Baseline(format!(
            "{}: {}",
            base.status, base.diagnostics
        )));
    }
    let cand = exec.execute_suite(candidate, suite, task, protocol)?;
    let report = validate_outcome(&cand, suite);
    let performance = profile_outcome(&cand, &base.timings, suite);
    Ok(Evaluation {
        baseline: base,
        candidate: cand,
        report,
        performance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(round: u32, ok: bool, g: Option<f64>) -> RoundRecord {
        RoundRecord {
            round,
            code: String::new(),
            correctness: ok,
            performance: g.map(|g| PerfReport {
                per_shape: vec![],
                geo_mean: g,
            }),
            report: None,
            provenance: String::new(),
            diagnostics: None,
        }
    }

    fn log(records: Vec<RoundRecord>) -> OptimizationLog {
        OptimizationLog {
            task_name: "t".into(),
            config_snapshot: serde_json::Value::Null,
            metadata: RunMetadata::default(),
            records,
            agent_transcripts: vec![],
            error: None,
        }
    }

    #[test]
    fn argmax_over_correct() {
        let l = log(vec![
            rec(0, true, Some(1.0)),
            rec(1, true, Some(1.26)),
            rec(2, true, Some(0.9)),
            rec(3, false, Some(3.0)),
        ]);
        assert_eq!(select_best(&l).round, 1);
    }

    #[test]
    fn baseline_fallback() {
        let l = log(vec![
            rec(0, true, Some(1.0)),
            rec(1, false, None),
            rec(2, false, Some(2.0)),
        ]);
        assert_eq!(select_best(&l).round, 0);
    }

    #[test]
    fn ties_go_to_earliest() {
        let l = log(vec![
            rec(0, true, Some(1.0)),
            rec(1, true, Some(1.25)),
            rec(2, true, Some(1.25)),
        ]);
        assert_eq!(select_best(&l).round, 1);
    }
}
