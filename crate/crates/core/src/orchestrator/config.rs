use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::OrchestratorError;
use crate::agents::{AgentMode, LlmConfig};
use crate::executor::{ExecBackendConfig, TimingProtocol};
use crate::metrics::{DiscrepancyMetric, MetricKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Scripted,
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentsConfig {
    pub kind: AgentKind,
    /// Scripted transcript (TOML), for `kind = "scripted"`.
    #[serde(default)]
    pub script: Option<PathBuf>,
    #[serde(default)]
    pub llm: Option<LlmConfig>,
    /// Extra requests after an unusable reply (test proposal or code).
    #[serde(default = "one")]
    pub parse_retries: u32,
}

fn one() -> u32 {
    1
}

impl Default for AgentsConfig {
    fn default() -> Self {
        Self {
            kind: AgentKind::Scripted,
            script: None,
            llm: None,
            parse_retries: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectnessConfig {
    /// Tolerance; defaults to the loosest default over the task's output dtypes.
    pub epsilon: Option<f64>,
    pub metric: MetricKind,
    pub rel_floor: f32,
}

impl Default for CorrectnessConfig {
    fn default() -> Self {
        let m = DiscrepancyMetric::default();
        Self {
            epsilon: None,
            metric: m.kind,
            rel_floor: m.rel_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TestingConfig {
    /// Added to every case seed.
    pub seed: u64,
    /// Seeds used when the agent proposes none.
    pub default_seeds: Vec<u64>,
    pub element_budget: usize,
}

impl Default for TestingConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            default_seeds: vec![0, 1],
            element_budget: 1 << 23,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub log: Option<PathBuf>,
    pub summary: Option<PathBuf>,
}

/// Everything a run needs besides the task. Relative paths inside a config
/// file resolve against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default)]
    pub mode: AgentMode,
    #[serde(default)]
    pub correctness: CorrectnessConfig,
    #[serde(default)]
    pub timing: TimingProtocol,
    #[serde(default)]
    pub testing: TestingConfig,
    pub executor: ExecBackendConfig,
    /// Only `optimize` needs agents; `evaluate` and `bench` ignore them.
    #[serde(default)]
    pub agents: AgentsConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_rounds() -> u32 {
    5
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, OrchestratorError> {
        toml::from_str(text).map_err(|e| OrchestratorError::Config(e.to_string()))
    }

    /// Reads a config file and rewrites its relative paths to be relative
    /// to the current directory.
    pub fn load(path: &Path) -> Result<Self, OrchestratorError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OrchestratorError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg =
            Self::from_toml(&text).map_err(|e| OrchestratorError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.executor.work_dir);
        if let Some(sim) = &mut self.executor.simulated {
            for e in &mut sim.entry {
                if let Some(s) = &mut e.source {
                    fix(s);
                }
            }
        }
        if let Some(sub) = &mut self.executor.subprocess {
            *sub = sub.resolved(base);
        }
        if let Some(s) = &mut self.agents.script {
            fix(s);
        }
        if let Some(l) = &mut self.output.log {
            fix(l);
        }
        if let Some(s) = &mut self.output.summary {
            fix(s);
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        let bad = |m: &str| Err(OrchestratorError::Config(m.into()));
        if self.rounds < 1 {
            return bad("rounds must be at least 1");
        }
        if let Some(e) = self.correctness.epsilon {
            if !(e.is_finite() && e >= 0.0) {
                return bad("epsilon must be finite and non-negative");
            }
        }
        if !(self.correctness.rel_floor.is_finite() && self.correctness.rel_floor > 0.0) {
            return bad("rel_floor must be positive");
        }
        if self.testing.element_budget == 0 || self.testing.default_seeds.is_empty() {
            return bad("testing.element_budget and testing.default_seeds must be non-empty");
        }
        self.timing
            .validate()
            .map_err(|e| OrchestratorError::Config(e.to_string()))?;
        self.executor
            .validate()
            .map_err(|e| OrchestratorError::Config(e.to_string()))?;
        match self.agents.kind {
            AgentKind::Scripted if self.agents.script.is_none() => bad("scripted agents need agents.script"),
            _ => Ok(()),
        }
    }

    pub fn metric(&self) -> DiscrepancyMetric {
        DiscrepancyMetric {
            kind: self.correctness.metric,
            rel_floor: self.correctness.rel_floor,
        }
    }

    /// Snapshot stored in the log header.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}
