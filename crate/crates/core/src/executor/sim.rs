use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{hash_source, io_err, ExecError, Executor, RunOutcome, RunStatus, TimingProtocol};
use crate::digest::derive_seed;
use crate::log::Candidate;
use crate::metrics::{MetricKind, TimingMap};
use crate::oracles::OracleRegistry;
use crate::suite::{Outputs, TestSuite};
use crate::task::{KernelTask, ParamRole};

/// What a registered candidate computes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Behavior {
    /// Exactly the task oracle.
    Oracle,
    /// The oracle, with the largest-magnitude element of the first output
    /// moved by `eps_multiple` times the suite tolerance (in the suite
    /// metric's units).
    Perturb { eps_multiple: f64 },
    /// First output filled with NaN.
    Nan,
    /// Fails at run time.
    Crash,
}

/// Declared latency per shape label, with an optional catch-all.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatencyModel {
    pub per_shape: BTreeMap<String, f64>,
    pub default_us: Option<f64>,
}

impl LatencyModel {
    pub fn uniform(us: f64) -> Self {
        Self {
            per_shape: BTreeMap::new(),
            default_us: Some(us),
        }
    }

    pub fn latency_for(&self, label: &str) -> Option<f64> {
        self.per_shape.get(label).copied().or(self.default_us)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimEntry {
    pub behavior: Behavior,
    pub latency: LatencyModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    #[default]
    Oracle,
    Perturb,
    Nan,
    Crash,
}

/// One registry entry as written in a config file. Exactly one of
/// `source` (a file whose contents are hashed) or `hash` must be set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimEntryConfig {
    pub source: Option<PathBuf>,
    pub hash: Option<String>,
    pub behavior: BehaviorKind,
    pub perturb_eps: Option<f64>,
    pub default_us: Option<f64>,
    pub latency_us: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatedConfig {
    /// Uniform per-sample noise, in percent of the declared latency.
    pub noise_pct: f64,
    pub noise_seed: u64,
    pub entry: Vec<SimEntryConfig>,
}

impl SimEntryConfig {
    fn to_entry(&self) -> Result<SimEntry, ExecError> {
        let behavior = match (self.behavior, self.perturb_eps) {
            (BehaviorKind::Perturb, Some(k)) if k.is_finite() => Behavior::Perturb { eps_multiple: k },
            (BehaviorKind::Perturb, _) => {
                return Err(ExecError::Config(
                    "behavior \"perturb\" needs a finite perturb_eps".into(),
                ))
            }
            (_, Some(_)) => {
                return Err(ExecError::Config(
                    "perturb_eps is only valid with behavior \"perturb\"".into(),
                ))
            }
            (BehaviorKind::Oracle, None) => Behavior::Oracle,
            (BehaviorKind::Nan, None) => Behavior::Nan,
            (BehaviorKind::Crash, None) => Behavior::Crash,
        };
        let lat_ok = |v: f64| v.is_finite() && v > 0.0;
        if self.default_us.is_some_and(|v| !lat_ok(v)) || self.latency_us.values().any(|&v| !lat_ok(v)) {
            return Err(ExecError::Config("latencies must be positive and finite".into()));
        }
        Ok(SimEntry {
            behavior,
            latency: LatencyModel {
                per_shape: self.latency_us.clone(),
                default_us: self.default_us,
            },
        })
    }
}

pub struct SimulatedExecutor {
    entries: HashMap<String, SimEntry>,
    oracles: OracleRegistry,
    noise_pct: f64,
    noise_seed: u64,
}

impl Default for SimulatedExecutor {
    fn default() -> Self {
        Self::new()
    }
}

impl SimulatedExecutor {
    pub fn new() -> Self {
        Self {
            entries: HashMap::new(),
            oracles: OracleRegistry::builtin(),
            noise_pct: 0.0,
            noise_seed: 0,
        }
    }

    pub fn with_noise(mut self, pct: f64, seed: u64) -> Self {
        self.noise_pct = pct;
        self.noise_seed = seed;
        self
    }

    pub fn with_oracles(mut self, oracles: OracleRegistry) -> Self {
        self.oracles = oracles;
        self
    }

    /// Registers `source`, returning its hash. Re-registering replaces.
    pub fn register(&mut self, source: &str, entry: SimEntry) -> String {
        let h = hash_source(source);
        self.entries.insert(h.clone(), entry);
        h
    }

    pub fn register_hash(&mut self, hash: &str, entry: SimEntry) {
        self.entries.insert(hash.to_string(), entry);
    }

    pub fn entry(&self, source: &str) -> Option<&SimEntry> {
        self.entries.get(&hash_source(source))
    }

    pub fn from_config(cfg: &SimulatedConfig, base_dir: &Path) -> Result<Self, ExecError> {
        if !(cfg.noise_pct.is_finite() && (0.0..100.0).contains(&cfg.noise_pct)) {
            return Err(ExecError::Config("noise_pct must be in [0, 100)".into()));
        }
        let mut exec = Self::new().with_noise(cfg.noise_pct, cfg.noise_seed);
        for e in &cfg.entry {
            let entry = e.to_entry()?;
            match (&e.source, &e.hash) {
                (Some(path), None) => {
                    let path = base_dir.join(path);
                    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
                    exec.register(&text, entry);
                }
                (None, Some(h)) => exec.register_hash(h, entry),
                _ => {
                    return Err(ExecError::Config(
                        "each simulated entry needs exactly one of source/hash".into(),
                    ))
                }
            }
        }
        Ok(exec)
    }

    fn samples(&self, hash: &str, label: &str, mean: f64, protocol: &TimingProtocol) -> Vec<f64> {
        let n = protocol.timed_runs as usize;
        if self.noise_pct == 0.0 {
            return vec![mean; n];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.noise_seed, &[hash.as_bytes(), label.as_bytes()]));
        let amp = self.noise_pct / 100.0;
        let mut draw = || mean * (1.0 + amp * rng.random_range(-1.0..=1.0));
        for _ in 0..protocol.warmup_runs {
            draw();
        }
        (0..n).map(|_| draw()).collect()
    }
}

fn perturb(outputs: &mut Outputs, first: &str, behavior: Behavior, suite: &TestSuite) {
    let Some(t) = outputs.get_mut(first) else {
        return;
    };
    match behavior {
        Behavior::Nan => {
            for i in 0..t.len() {
                t.set_f32(i, f32::NAN);
            }
        }
        Behavior::Perturb { eps_multiple } => {
            if t.is_empty() {
                return;
            }
            let idx = (0..t.len())
                .max_by(|&a, &b| t.get_f32(a).abs().total_cmp(&t.get_f32(b).abs()))
                .unwrap_or(0);
            let x = t.get_f32(idx) as f64;
            let k = eps_multiple * suite.epsilon;
            let moved = match suite.metric.kind {
                MetricKind::MaxAbs => x + k,
                MetricKind::MaxRelAbs => x * (1.0 + k),
            };
            t.set_f32(idx, moved as f32);
        }
        Behavior::Oracle | Behavior::Crash => {}
    }
}

impl Executor for SimulatedExecutor {
    fn execute_suite(
        &self,
        candidate: &Candidate,
        suite: &TestSuite,
        task: &KernelTask,
        protocol: &TimingProtocol,
    ) -> Result<RunOutcome, ExecError> {
        protocol.validate()?;
        let hash = hash_source(&candidate.source);
        let Some(entry) = self.entries.get(&hash) else {
            return Ok(RunOutcome::failure(
                RunStatus::CompileError,
                format!("simulated compile: no registered behavior for source hash {hash}"),
            ));
        };
        if entry.behavior == Behavior::Crash {
            return Ok(RunOutcome::failure(
                RunStatus::RuntimeError,
                "simulated runtime fault: kernel crashed",
            ));
        }

        let first_output = task
            .params(ParamRole::Output)
            .next()
            .map(|p| p.name.clone())
            .unwrap_or_default();
        let results: Vec<Result<(String, Outputs), String>> = std::thread::scope(|s| {
            let handles: Vec<_> = suite
                .cases()
                .iter()
                .map(|case| {
                    let first_output = &first_output;
                    s.spawn(move || {
                        let mut out = self
                            .oracles
                            .evaluate(task, &case.inputs)
                            .map_err(|e| format!("case {}: {e}", case.case_id))?;
                        perturb(&mut out, first_output, entry.behavior, suite);
                        Ok((case.case_id.clone(), out))
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("simulated case panicked"))
                .collect()
        });
        let mut outputs = BTreeMap::new();
        for r in results {
            match r {
                Ok((id, out)) => {
                    outputs.insert(id, out);
                }
                Err(msg) => return Ok(RunOutcome::failure(RunStatus::RuntimeError, msg)),
            }
        }

        let mut timings = TimingMap::new();
        for label in suite.shape_labels() {
            let mean = entry.latency.latency_for(label).ok_or_else(|| {
                ExecError::Config(format!("simulated entry {hash} declares no latency for shape {label}"))
            })?;
            timings.insert(label.to_string(), self.samples(&hash, label, mean, protocol));
        }
        Ok(RunOutcome {
            status: RunStatus::Ok,
            outputs,
            timings,
            diagnostics: String::new(),
        })
    }
}
