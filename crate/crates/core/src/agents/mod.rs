//! The testing, profiling, planning and coding roles.
//!
//! Every backend exchange goes through [`AgentTeam`], which records one
//! [`AgentTranscript`] per exchange. In multi-agent mode each request is a
//! fresh two-message conversation (role system prompt + user prompt). In
//! single-agent mode all roles share one growing conversation.

mod backend;
mod parse;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

pub use backend::{
    ChatBackend, ChatMessage, ChatReply, LlmBackend, LlmConfig, ReqwestTransport, RetryPolicy, Script, ScriptEntry,
    ScriptedBackend, ScriptedFault, Sleeper, Transport,
};
pub use parse::{code_blocks, largest_code_block, parse_suggestion, parse_test_proposal, TestProposal};

use crate::executor::{RunOutcome, RunStatus};
use crate::log::{AgentRole, AgentTranscript, Candidate, RoundRecord};
use crate::metrics::{correctness_pass, CorrectnessReport, DiscrepancyMetric, FailureKind, PerfReport, TimingMap};
use crate::oracles::{build_suite_over, InputGenSpec, OracleError, OracleRegistry};
use crate::suite::TestSuite;
use crate::task::{shape_label, KernelTask, ParamRole, ShapeFamily};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent configuration: {0}")]
    Config(String),
    #[error("no scripted response for ({role}, round {round})")]
    Scripting { role: AgentRole, round: u32 },
    #[error("backend failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("coding agent produced no code block: {0}")]
    Coding(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

impl AgentError {
    /// Errors that make continuing the run meaningless (as opposed to a
    /// single failed round).
    pub fn is_fatal(&self) -> bool {
        matches!(
            self,
            AgentError::Config(_) | AgentError::Scripting { .. } | AgentError::Oracle(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyTag {
    LoopInvariantHoisting,
    WarpShuffleReduction,
    VectorizedLoad,
    FastMathIntrinsics,
    Other,
}

impl StrategyTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyTag::LoopInvariantHoisting => "loop-invariant-hoisting",
            StrategyTag::WarpShuffleReduction => "warp-shuffle-reduction",
            StrategyTag::VectorizedLoad => "vectorized-load",
            StrategyTag::FastMathIntrinsics => "fast-math-intrinsics",
            StrategyTag::Other => "other",
        }
    }

    /// Maps a free-form tag onto the vocabulary; unknown tags become `Other`.
    pub fn from_tag(s: &str) -> Self {
        let norm = s.trim().to_ascii_lowercase().replace(['_', ' '], "-");
        match norm.as_str() {
            "loop-invariant-hoisting" => StrategyTag::LoopInvariantHoisting,
            "warp-shuffle-reduction" => StrategyTag::WarpShuffleReduction,
            "vectorized-load" => StrategyTag::VectorizedLoad,
            "fast-math-intrinsics" => StrategyTag::FastMathIntrinsics,
            _ => StrategyTag::Other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuggestionItem {
    pub tag: StrategyTag,
    pub rationale: String,
    pub region: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suggestion {
    pub items: Vec<SuggestionItem>,
    pub raw_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentMode {
    #[default]
    MultiAgent,
    SingleAgent,
}

/// Prompt templates with `{{name}}` placeholders.
#[derive(Debug, Clone)]
pub struct Prompts {
    pub testing: String,
    pub planning: String,
    pub coding: String,
    pub repair_tests: String,
    pub repair_code: String,
    pub system_multi: String,
    pub system_single: String,
}

pub const PROMPT_VERSION: &str = "v1";

impl Prompts {
    pub fn builtin() -> Self {
        Self {
            testing: include_str!("../../prompts/testing.v1.txt").into(),
            planning: include_str!("../../prompts/planning.v1.txt").into(),
            coding: include_str!("../../prompts/coding.v1.txt").into(),
            repair_tests: include_str!("../../prompts/repair_tests.v1.txt").into(),
            repair_code: include_str!("../../prompts/repair_code.v1.txt").into(),
            system_multi: include_str!("../../prompts/system_multi.v1.txt").into(),
            system_single: include_str!("../../prompts/system_single.v1.txt").into(),
        }
    }
}

/// Substitutes `{{key}}` placeholders. Unknown placeholders are left as is.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in vars {
        out = out.replace(&format!("{{{{{k}}}}}"), v);
    }
    out
}

/// Knobs for suite construction.
#[derive(Debug, Clone)]
pub struct TestingOptions {
    /// Largest element count allowed for any single tensor.
    pub element_budget: usize,
    pub default_seeds: Vec<u64>,
    /// Added (wrapping) to every case seed.
    pub seed_offset: u64,
    pub parse_retries: u32,
    pub epsilon: f64,
    pub metric: DiscrepancyMetric,
    pub input_spec: InputGenSpec,
}

impl TestingOptions {
    pub fn new(epsilon: f64) -> Self {
        Self {
            element_budget: 1 << 23,
            default_seeds: vec![0, 1],
            seed_offset: 0,
            parse_retries: 1,
            epsilon,
            metric: DiscrepancyMetric::default(),
            input_spec: InputGenSpec::default(),
        }
    }
}

/// Shapes and seeds chosen for the suite, with notes on anything dropped,
/// clamped or defaulted.
#[derive(Debug, Clone, PartialEq)]
pub struct TestPlan {
    pub families: Vec<ShapeFamily>,
    pub seeds: Vec<u64>,
    pub fallback: bool,
    pub notes: Vec<String>,
}

impl TestPlan {
    pub fn describe(&self) -> String {
        let shapes: Vec<&str> = self.families.iter().map(|f| f.label.as_str()).collect();
        let mut s = format!("test plan: shapes {}; seeds {:?}", shapes.join(" "), self.seeds);
        if self.fallback {
            s.push_str("; fallback to task shape families");
        }
        for n in &self.notes {
            let _ = write!(s, "\n  {n}");
        }
        s
    }
}

/// Validates an agent proposal against the task signature and element
/// budget. Oversized shapes have their leading extent reduced.
pub fn plan_tests(task: &KernelTask, proposal: &TestProposal, opts: &TestingOptions) -> TestPlan {
    let mut notes = Vec::new();
    let mut families: Vec<ShapeFamily> = Vec::new();
    for raw in &proposal.shapes {
        if raw.len() != task.shape_dims.len() {
            notes.push(format!("dropped {raw:?}: expected {} extents", task.shape_dims.len()));
            continue;
        }
        if raw.iter().any(|&e| e <= 0) {
            notes.push(format!("dropped {raw:?}: extents must be positive"));
            continue;
        }
        let mut ext: Vec<usize> = raw.iter().map(|&e| e as usize).collect();
        let elems = match task.max_tensor_elements(&ext) {
            Ok(n) => n,
            Err(e) => {
                notes.push(format!("dropped {raw:?}: {e}"));
                continue;
            }
        };
        if elems > opts.element_budget {
            let before = shape_label(&ext);
            let mut lead = ((ext[0] as u128 * opts.element_budget as u128) / elems as u128).max(1) as usize;
            loop {
                ext[0] = lead;
                match task.max_tensor_elements(&ext) {
                    Ok(n) if n <= opts.element_budget => break,
                    _ if lead > 1 => lead -= 1.max(lead / 16),
                    _ => break,
                }
            }
            if task.max_tensor_elements(&ext).map_or(true, |n| n > opts.element_budget) {
                notes.push(format!(
                    "dropped {before}: exceeds element budget {}",
                    opts.element_budget
                ));
                continue;
            }
            notes.push(format!("clamped {before} to {}", shape_label(&ext)));
        }
        let fam = ShapeFamily::new(ext);
        if families.iter().any(|f| f.label == fam.label) {
            continue;
        }
        families.push(fam);
    }
    let mut seeds = Vec::new();
    for s in &proposal.seeds {
        if !seeds.contains(s) {
            seeds.push(*s);
        }
    }
    if seeds.is_empty() {
        seeds = opts.default_seeds.clone();
    }
    let seeds = seeds.into_iter().map(|s| s.wrapping_add(opts.seed_offset)).collect();
    if families.is_empty() {
        notes.push("no proposed shape survived validation".into());
        return fallback_plan(task, opts, notes);
    }
    TestPlan {
        families,
        seeds,
        fallback: false,
        notes,
    }
}

fn fallback_plan(task: &KernelTask, opts: &TestingOptions, notes: Vec<String>) -> TestPlan {
    TestPlan {
        families: task.shape_families.clone(),
        seeds: opts
            .default_seeds
            .iter()
            .map(|s| s.wrapping_add(opts.seed_offset))
            .collect(),
        fallback: true,
        notes,
    }
}

/// Correctness of an executed candidate.
pub fn validate_outcome(outcome: &RunOutcome, suite: &TestSuite) -> CorrectnessReport {
    match outcome.status {
        RunStatus::Ok => correctness_pass(suite, &outcome.outputs),
        RunStatus::CompileError => CorrectnessReport::failed(FailureKind::Compile, outcome.diagnostics.clone()),
        RunStatus::RuntimeError | RunStatus::Timeout => CorrectnessReport::failed(
            FailureKind::Runtime,
            format!("{}: {}", outcome.status, outcome.diagnostics),
        ),
    }
}

/// Performance of an executed candidate against the baseline samples, or
/// `None` when it did not run.
pub fn profile_outcome(outcome: &RunOutcome, baseline: &TimingMap, suite: &TestSuite) -> Option<PerfReport> {
    if !outcome.is_ok() {
        return None;
    }
    match PerfReport::compute(&suite.shape_labels(), baseline, &outcome.timings) {
        Ok(p) => Some(p),
        Err(e) => {
            warn!(target: "kernelforge::agents", "profiling failed: {e}");
            None
        }
    }
}

/// What the planner sees about the current candidate.
#[derive(Debug, Clone, Copy)]
pub struct PlanContext<'a> {
    pub round: u32,
    pub prev: &'a Candidate,
    pub pass_prev: bool,
    pub perf_prev: Option<&'a PerfReport>,
    pub diagnostics: Option<&'a str>,
    pub history: &'a [RoundRecord],
}

pub const CORRECTNESS_FIRST: &str = "The current candidate FAILED correctness validation. Restore correct results \
before pursuing any further speedup: identify and fix the defect first.";

fn render_timings(perf: Option<&PerfReport>) -> String {
    let Some(p) = perf else {
        return "not available (the candidate did not run)".into();
    };
    let mut s = String::new();
    for sp in &p.per_shape {
        let _ = writeln!(
            s,
            "- {}: {:.2} vs {:.2} us ({:.2}x)",
            sp.label, sp.baseline_us, sp.candidate_us, sp.speedup
        );
    }
    let _ = write!(s, "geometric-mean speedup: {:.3}x", p.geo_mean);
    s
}

fn render_history(history: &[RoundRecord]) -> String {
    if history.is_empty() {
        return "none".into();
    }
    let mut s = String::new();
    for r in history {
        let _ = write!(s, "round {}: ", r.round);
        match (r.correctness, r.geo_mean()) {
            (true, Some(g)) => {
                let _ = write!(s, "correct, geo-mean {g:.3}x");
            }
            (false, g) => {
                let kind = r
                    .report
                    .as_ref()
                    .map(|c| c.failure_kind)
                    .unwrap_or(FailureKind::Mismatch);
                let _ = write!(s, "incorrect ({kind:?})");
                if let Some(g) = g {
                    let _ = write!(s, ", geo-mean {g:.3}x");
                }
            }
            (true, None) => s.push_str("correct, no timings"),
        }
        if r.round == 0 {
            s.push_str(" (baseline)");
        }
        s.push('\n');
    }
    s.trim_end().to_string()
}

fn render_signature(task: &KernelTask) -> String {
    let mut s = String::new();
    for (i, p) in task.signature.iter().enumerate() {
        let shape: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
        let _ = match p.role {
            ParamRole::Scalar => writeln!(s, "  {i}. {} (scalar {})", p.name, p.value.unwrap_or_default()),
            role => writeln!(s, "  {i}. {} ({role:?}, {}, [{}])", p.name, p.dtype, shape.join(", ")),
        };
    }
    s.trim_end().to_string()
}

fn entry_signature(task: &KernelTask) -> String {
    format!(
        "extern \"C\" int {}(void** buffers, const float* scalars, const int64_t* dims, cudaStream_t stream)\n\
         buffers follow the tensor parameters in order, scalars the scalar parameters, dims = [{}]\n{}",
        task.entry,
        task.shape_dims.join(", "),
        render_signature(task)
    )
}

/// Drives the roles over one chat backend and keeps their transcripts.
pub struct AgentTeam {
    backend: Box<dyn ChatBackend>,
    mode: AgentMode,
    prompts: Prompts,
    shared: Vec<ChatMessage>,
    transcripts: Vec<AgentTranscript>,
    parse_retries: u32,
}

impl AgentTeam {
    pub fn new(backend: Box<dyn ChatBackend>, mode: AgentMode) -> Self {
        let prompts = Prompts::builtin();
        let shared = match mode {
            AgentMode::SingleAgent => vec![ChatMessage::system(prompts.system_single.trim_end())],
            AgentMode::MultiAgent => Vec::new(),
        };
        Self {
            backend,
            mode,
            prompts,
            shared,
            transcripts: Vec::new(),
            parse_retries: 1,
        }
    }

    pub fn with_parse_retries(mut self, n: u32) -> Self {
        self.parse_retries = n;
        self
    }

    pub fn mode(&self) -> AgentMode {
        self.mode
    }

    pub fn prompts(&self) -> &Prompts {
        &self.prompts
    }

    /// Drains transcripts recorded since the last call.
    pub fn take_transcripts(&mut self) -> Vec<AgentTranscript> {
        std::mem::take(&mut self.transcripts)
    }

    fn start(&mut self, role: AgentRole) -> Vec<ChatMessage> {
        match self.mode {
            AgentMode::MultiAgent => {
                vec![ChatMessage::system(render(
                    self.prompts.system_multi.trim_end(),
                    &[("role", role.as_str())],
                ))]
            }
            AgentMode::SingleAgent => std::mem::take(&mut self.shared),
        }
    }

    fn finish(&mut self, convo: Vec<ChatMessage>) {
        if self.mode == AgentMode::SingleAgent {
            self.shared = convo;
        }
    }

    /// One exchange: appends `user` to the conversation, records the
    /// transcript and appends the reply.
    fn ask(
        &mut self,
        role: AgentRole,
        round: u32,
        convo: &mut Vec<ChatMessage>,
        user: String,
    ) -> Result<String, AgentError> {
        let user = match self.mode {
            AgentMode::SingleAgent => format!("[step: {role}]\n{user}"),
            AgentMode::MultiAgent => user,
        };
        convo.push(ChatMessage::user(user.clone()));
        match self.backend.chat(role, round, convo) {
            Ok(reply) => {
                self.transcripts.push(AgentTranscript {
                    role,
                    round,
                    prompt: user,
                    response: reply.text.clone(),
                    usage: reply.usage,
                    latency_ms: reply.latency_ms,
                    attempts: reply.attempts,
                    error: None,
                });
                convo.push(ChatMessage::assistant(reply.text.clone()));
                Ok(reply.text)
            }
            Err(e) => {
                convo.pop();
                if let AgentError::Transport { attempts, message } = &e {
                    self.transcripts.push(AgentTranscript {
                        role,
                        round,
                        prompt: user,
                        response: String::new(),
                        usage: None,
                        latency_ms: None,
                        attempts: *attempts,
                        error: Some(message.clone()),
                    });
                }
                Err(e)
            }
        }
    }

    /// Asks the testing role for shapes and seeds, then labels every case
    /// with the oracle. Unusable proposals fall back to the task's shape
    /// families.
    pub fn generate_tests(
        &mut self,
        baseline: &Candidate,
        task: &KernelTask,
        opts: &TestingOptions,
        registry: &OracleRegistry,
    ) -> Result<(TestSuite, TestPlan), AgentError> {
        let role = AgentRole::Testing;
        let defaults: Vec<&str> = task.shape_families.iter().map(|f| f.label.as_str()).collect();
        let prompt = render(
            &self.prompts.testing,
            &[
                ("task_name", &task.name),
                ("entry", &task.entry),
                ("signature", &render_signature(task)),
                ("shape_dims", &task.shape_dims.join(", ")),
                ("default_shapes", &defaults.join("\n")),
                ("source", baseline.source.trim_end()),
                ("budget", &opts.element_budget.to_string()),
            ],
        );
        let mut convo = self.start(role);
        let mut reply = self.ask(role, 0, &mut convo, prompt);
        let mut plan = None;
        let mut tries = 0;
        while let Ok(text) = &reply {
            match parse_test_proposal(text) {
                Ok(p) => {
                    plan = Some(plan_tests(task, &p, opts));
                    break;
                }
                Err(problem) if tries < self.parse_retries => {
                    tries += 1;
                    let repair = render(&self.prompts.repair_tests, &[("problem", &problem)]);
                    reply = self.ask(role, 0, &mut convo, repair);
                }
                Err(problem) => {
                    plan = Some(fallback_plan(
                        task,
                        opts,
                        vec![format!("unparsable proposal: {problem}")],
                    ));
                    break;
                }
            }
        }
        self.finish(convo);
        let plan = match (plan, reply) {
            (Some(p), _) => p,
            (None, Err(e)) if e.is_fatal() => return Err(e),
            (None, Err(e)) => fallback_plan(task, opts, vec![format!("testing agent unavailable: {e}")]),
            (None, Ok(_)) => unreachable!("a successful reply always yields a plan"),
        };
        if plan.fallback {
            warn!(target: "kernelforge::agents", "{}", plan.describe());
        } else {
            info!(target: "kernelforge::agents", "{}", plan.describe());
        }
        let suite = build_suite_over(
            task,
            &plan.families,
            &plan.seeds,
            opts.epsilon,
            opts.metric,
            registry,
            &opts.input_spec,
        )?;
        Ok((suite, plan))
    }

    /// Renders the planning prompt for `ctx`.
    pub fn planning_prompt(&self, task: &KernelTask, ctx: &PlanContext<'_>) -> String {
        render(
            &self.prompts.planning,
            &[
                ("round", &ctx.round.to_string()),
                ("prev_round", &ctx.prev.round.to_string()),
                ("task_name", &task.name),
                ("status", if ctx.pass_prev { "passed" } else { "FAILED" }),
                (
                    "correctness_directive",
                    if ctx.pass_prev { "" } else { CORRECTNESS_FIRST },
                ),
                ("timings", &render_timings(ctx.perf_prev)),
                (
                    "diagnostics",
                    ctx.diagnostics.filter(|d| !d.trim().is_empty()).unwrap_or("none"),
                ),
                ("history", &render_history(ctx.history)),
                ("source", ctx.prev.source.trim_end()),
            ],
        )
    }

    pub fn suggest(&mut self, task: &KernelTask, ctx: &PlanContext<'_>) -> Result<Suggestion, AgentError> {
        let role = AgentRole::Planning;
        let prompt = self.planning_prompt(task, ctx);
        let mut convo = self.start(role);
        let reply = self.ask(role, ctx.round, &mut convo, prompt);
        self.finish(convo);
        Ok(parse_suggestion(&reply?))
    }

    /// Asks the coding role to apply `suggestion` to `prev`; the largest
    /// fenced block of the reply becomes the new source.
    pub fn apply(
        &mut self,
        task: &KernelTask,
        round: u32,
        prev: &Candidate,
        suggestion: &Suggestion,
    ) -> Result<Candidate, AgentError> {
        let role = AgentRole::Coding;
        let mut items = String::new();
        for (i, it) in suggestion.items.iter().enumerate() {
            let _ = write!(items, "{}. [{}] {}", i + 1, it.tag.as_str(), it.rationale);
            if let Some(r) = &it.region {
                let _ = write!(items, " (region: {r})");
            }
            items.push('\n');
        }
        let prompt = render(
            &self.prompts.coding,
            &[
                ("round", &round.to_string()),
                ("task_name", &task.name),
                ("entry_signature", &entry_signature(task)),
                ("suggestions", items.trim_end()),
                ("source", prev.source.trim_end()),
            ],
        );
        let mut convo = self.start(role);
        let mut reply = self.ask(role, round, &mut convo, prompt);
        let mut tries = 0;
        let result = loop {
            let text = match reply {
                Ok(t) => t,
                Err(e) => break Err(e),
            };
            if let Some((idx, block, n)) = largest_code_block(&text) {
                let tags: Vec<&str> = suggestion.items.iter().map(|i| i.tag.as_str()).collect();
                let mut provenance = format!("round {round}: applied [{}]", tags.join(", "));
                if n > 1 {
                    info!(target: "kernelforge::agents", "coding reply has {n} code blocks; taking block {}", idx + 1);
                    let _ = write!(provenance, "; took largest of {n} code blocks (#{})", idx + 1);
                }
                break Ok(Candidate {
                    round,
                    source: block.to_string(),
                    provenance,
                });
            }
            if tries >= self.parse_retries {
                break Err(AgentError::Coding(format!(
                    "no fenced block after {} repair request(s)",
                    tries
                )));
            }
            tries += 1;
            let repair = self.prompts.repair_code.clone();
            reply = self.ask(role, round, &mut convo, repair);
        };
        self.finish(convo);
        result
    }
}
