//! Command-line front end: `optimize`, `evaluate`, `bench` and `report`.
//!
//! Exit codes are stable; see [`exit`].

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing::warn;

use kernelforge_core::agents::{profile_outcome, AgentMode};
use kernelforge_core::executor::{ExecError, ExecKind, Executor};
use kernelforge_core::log::{load_log, Candidate, OptimizationLog, RunMetadata};
use kernelforge_core::metrics::{CorrectnessReport, PerfReport};
use kernelforge_core::oracles::{build_suite_over, OracleRegistry};
use kernelforge_core::orchestrator::{
    build_team, effective_epsilon, evaluate, optimize, render_report, summarize, AgentKind, OrchestratorError,
    ReportFormat, RunConfig,
};
use kernelforge_core::suite::TestSuite;
use kernelforge_core::task::{load_task, KernelTask, ShapeFamily};

/// Process exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    /// `evaluate`: the candidate failed the correctness check.
    pub const INCORRECT: i32 = 1;
    /// Bad flags, config, manifest or log file.
    pub const CONFIG: i32 = 2;
    /// Agent backend or scripted transcript failure.
    pub const BACKEND: i32 = 3;
    /// Executor or toolchain failure, including a baseline that does not run.
    pub const EXECUTOR: i32 = 4;
}

#[derive(Debug, Parser)]
#[command(name = "kernelforge", version, about = "Agentic GPU kernel optimization harness")]
pub struct Cli {
    /// More logging on stderr (-v info, -vv debug). KERNELFORGE_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the optimization loop on one task.
    Optimize(OptimizeArgs),
    /// Check a candidate against the oracle and time it against a baseline.
    Evaluate(EvaluateArgs),
    /// Time a candidate against a baseline without checking correctness.
    Bench(BenchArgs),
    /// Render one or more run logs.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BackendArg {
    #[value(alias = "simulated")]
    Sim,
    Subprocess,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AgentsArg {
    Scripted,
    Llm,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    MultiAgent,
    SingleAgent,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Text,
    Md,
    Csv,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Text => ReportFormat::Text,
            FormatArg::Md => ReportFormat::Md,
            FormatArg::Csv => ReportFormat::Csv,
        }
    }
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// Task manifest (TOML).
    #[arg(long)]
    pub task: PathBuf,
    /// Run config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub rounds: Option<u32>,
    /// Offset added to every test-case seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendArg>,
    #[arg(long, value_enum)]
    pub agents: Option<AgentsArg>,
    /// Scripted transcript; implies nothing about `--agents`.
    #[arg(long)]
    pub script: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Log path (JSONL). Defaults to `<task>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Summary path; `.md` and `.csv` pick the format, anything else is text.
    #[arg(long)]
    pub summary: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CandidateArgs {
    #[arg(long)]
    pub task: PathBuf,
    /// Run config (TOML); the executor, timing and testing sections apply.
    #[arg(long)]
    pub config: PathBuf,
    /// Candidate source file.
    #[arg(long)]
    pub candidate: PathBuf,
    /// Baseline source file. Defaults to the task's own source.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Shape tuple such as `16,4096`; repeatable. Defaults to the task's families.
    #[arg(long = "shape", value_parser = parse_shape)]
    pub shapes: Vec<Vec<usize>>,
    /// Case seeds, comma separated. Defaults to the config's.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CandidateArgs,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: CandidateArgs,
    /// Required acknowledgement that outputs are not checked.
    #[arg(long)]
    pub unsafe_skip_correctness: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub logs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub format: FormatArg,
}

fn parse_shape(s: &str) -> Result<Vec<usize>, String> {
    s.split([',', 'x'])
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| format!("bad extent `{p}` in shape `{s}`"))
        })
        .collect()
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::CONFIG } else { exit::OK };
            let _ = e.print();
            return code;
        }
    };
    init_tracing(cli.verbose);
    match cli.command {
        Command::Optimize(a) => cmd_optimize(&a),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

fn init_tracing(verbose: u8) {
    use tracing_subscriber::EnvFilter;
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_env("KERNELFORGE_LOG").unwrap_or_else(|_| EnvFilter::new(default));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn fail(code: i32, msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    code
}

fn exit_for(e: &OrchestratorError) -> i32 {
    match e.kind() {
        "scripting" | "backend" => exit::BACKEND,
        "executor" => exit::EXECUTOR,
        _ => exit::CONFIG,
    }
}

fn exec_exit(e: &ExecError) -> i32 {
    match e {
        ExecError::Config(_) | ExecError::Io { .. } => exit::CONFIG,
        _ => exit::EXECUTOR,
    }
}

fn metadata() -> RunMetadata {
    RunMetadata {
        started_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        tool_version: concat!("kernelforge ", env!("CARGO_PKG_VERSION")).into(),
    }
}

fn apply_overrides(cfg: &mut RunConfig, a: &OptimizeArgs) {
    if let Some(r) = a.rounds {
        cfg.rounds = r;
    }
    if let Some(s) = a.seed {
        cfg.testing.seed = s;
    }
    if let Some(e) = a.epsilon {
        cfg.correctness.epsilon = Some(e);
    }
    if let Some(b) = a.backend {
        cfg.executor.kind = match b {
            BackendArg::Sim => ExecKind::Simulated,
            BackendArg::Subprocess => ExecKind::Subprocess,
        };
    }
    if let Some(k) = a.agents {
        cfg.agents.kind = match k {
            AgentsArg::Scripted => AgentKind::Scripted,
            AgentsArg::Llm => AgentKind::Llm,
        };
    }
    if let Some(p) = &a.script {
        cfg.agents.script = Some(p.clone());
    }
    if let Some(m) = a.mode {
        cfg.mode = match m {
            ModeArg::MultiAgent => AgentMode::MultiAgent,
            ModeArg::SingleAgent => AgentMode::SingleAgent,
        };
    }
    if let Some(p) = &a.log {
        cfg.output.log = Some(p.clone());
    }
    if let Some(p) = &a.summary {
        cfg.output.summary = Some(p.clone());
    }
}

fn format_for(path: &Path) -> ReportFormat {
    match path.extension().and_then(|e| e.to_str()) {
        Some("md") => ReportFormat::Md,
        Some("csv") => ReportFormat::Csv,
        _ => ReportFormat::Text,
    }
}

fn write_summary(log: &OptimizationLog, path: &Path) {
    let summary = summarize(log);
    println!("{}", render_report(std::slice::from_ref(&summary), ReportFormat::Text));
    let body = render_report(&[summary], format_for(path));
    if let Err(e) = fs::write(path, body) {
        warn!("cannot write summary {}: {e}", path.display());
    }
}

pub fn cmd_optimize(a: &OptimizeArgs) -> i32 {
    let mut cfg = match RunConfig::load(&a.config) {
        Ok(c) => c,
        Err(e) => return fail(exit::CONFIG, e),
    };
    apply_overrides(&mut cfg, a);
    if let Err(e) = cfg.validate() {
        return fail(exit::CONFIG, e);
    }
    let task = match load_task(&a.task) {
        Ok(t) => t,
        Err(e) => return fail(exit::CONFIG, e),
    };
    let log_path = cfg
        .output
        .log
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.log.jsonl", task.name)));
    let summary_path = cfg
        .output
        .summary
        .clone()
        .unwrap_or_else(|| log_path.with_extension("summary.md"));
    cfg.output.log = Some(log_path.clone());
    cfg.output.summary = Some(summary_path.clone());

    let exec = match cfg.executor.build(Path::new("")) {
        Ok(x) => x,
        Err(e) => return fail(exec_exit(&e), e),
    };
    // The credential check happens here, before any request is made.
    let mut team = match build_team(&cfg) {
        Ok(t) => t,
        Err(e) => return fail(exit_for(&e), e),
    };
    let registry = OracleRegistry::builtin();
    match optimize(
        &task,
        &cfg,
        exec.as_ref(),
        &mut team,
        &registry,
        Some(&log_path),
        metadata(),
    ) {
        Ok(log) => {
            write_summary(&log, &summary_path);
            println!("log: {}", log_path.display());
            exit::OK
        }
        Err(f) => {
            if let Some(partial) = &f.partial {
                write_summary(partial, &summary_path);
                println!("partial log: {}", log_path.display());
            }
            fail(exit_for(&f.error), &f.error)
        }
    }
}

struct Prepared {
    task: KernelTask,
    cfg: RunConfig,
    baseline: Candidate,
    candidate: Candidate,
    exec: Box<dyn Executor>,
}

fn prepare(a: &CandidateArgs) -> Result<Prepared, i32> {
    let cfg = RunConfig::load(&a.config).map_err(|e| fail(exit::CONFIG, e))?;
    cfg.timing.validate().map_err(|e| fail(exit::CONFIG, e))?;
    let mut task = load_task(&a.task).map_err(|e| fail(exit::CONFIG, e))?;
    if !a.shapes.is_empty() {
        task.shape_families = a.shapes.iter().map(|s| ShapeFamily::new(s.clone())).collect();
        task.validate().map_err(|e| fail(exit::CONFIG, e))?;
    }
    let read =
        |p: &Path| fs::read_to_string(p).map_err(|e| fail(exit::CONFIG, format!("cannot read {}: {e}", p.display())));
    let baseline = match &a.baseline {
        Some(p) => Candidate::baseline(read(p)?),
        None => Candidate::baseline(task.baseline_source.clone()),
    };
    let candidate = Candidate {
        round: 1,
        source: read(&a.candidate)?,
        provenance: format!("file {}", a.candidate.display()),
    };
    let exec = cfg.executor.build(Path::new("")).map_err(|e| fail(exec_exit(&e), e))?;
    Ok(Prepared {
        task,
        cfg,
        baseline,
        candidate,
        exec,
    })
}

fn suite_for(p: &Prepared, seeds: &[u64], epsilon: f64) -> Result<TestSuite, i32> {
    let seeds: Vec<u64> = if seeds.is_empty() {
        p.cfg.testing.default_seeds.clone()
    } else {
        seeds.to_vec()
    };
    let seeds: Vec<u64> = seeds.iter().map(|s| s.wrapping_add(p.cfg.testing.seed)).collect();
    build_suite_over(
        &p.task,
        &p.task.shape_families,
        &seeds,
        epsilon,
        p.cfg.metric(),
        &OracleRegistry::builtin(),
        &Default::default(),
    )
    .map_err(|e| fail(exit::CONFIG, e))
}

fn render_correctness(r: &CorrectnessReport, epsilon: f64) -> String {
    let mut s = String::new();
    let verdict = if r.passed { "PASS" } else { "FAIL" };
    let _ = writeln!(
        s,
        "correctness: {verdict} (max discrepancy {:.3e}, tolerance {epsilon:.3e})",
        r.max_discrepancy
    );
    if let Some(d) = &r.detail {
        let _ = writeln!(s, "  {}", d.trim_end());
    }
    for (case, d) in &r.per_case {
        let bad = !(d.is_finite() && *d <= epsilon);
        let _ = writeln!(s, "  {case:<24} {d:.3e}{}", if bad { "  FAIL" } else { "" });
    }
    s
}

fn render_perf(p: &PerfReport) -> String {
    let mut s = String::from("performance (mean microseconds):\n");
    let _ = writeln!(
        s,
        "  {:<24} {:>10} {:>10} {:>8}",
        "shape", "baseline", "candidate", "speedup"
    );
    for sh in &p.per_shape {
        let _ = writeln!(
            s,
            "  {:<24} {:>10.2} {:>10.2} {:>7.2}x",
            sh.label, sh.baseline_us, sh.candidate_us, sh.speedup
        );
    }
    let _ = writeln!(s, "  geo_mean speedup: {:.3}x", p.geo_mean);
    s
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> i32 {
    let p = match prepare(&a.common) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let mut cfg = p.cfg.clone();
    if a.epsilon.is_some() {
        cfg.correctness.epsilon = a.epsilon;
    }
    let epsilon = effective_epsilon(&cfg, &p.task);
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return fail(exit::CONFIG, "epsilon must be finite and non-negative");
    }
    let suite = match suite_for(&p, &a.common.seeds, epsilon) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let ev = match evaluate(&p.task, &p.baseline, &p.candidate, &suite, p.exec.as_ref(), &cfg.timing) {
        Ok(ev) => ev,
        Err(e) => return fail(exit_for(&e), e),
    };
    print!("{}", render_correctness(&ev.report, epsilon));
    if let Some(perf) = &ev.performance {
        print!("{}", render_perf(perf));
    }
    if ev.report.passed {
        exit::OK
    } else {
        exit::INCORRECT
    }
}

pub fn cmd_bench(a: &BenchArgs) -> i32 {
    if !a.unsafe_skip_correctness {
        return fail(
            exit::CONFIG,
            "bench does not check outputs; pass --unsafe-skip-correctness to confirm, or use evaluate",
        );
    }
    let p = match prepare(&a.common) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let epsilon = effective_epsilon(&p.cfg, &p.task);
    let suite = match suite_for(&p, &a.common.seeds, epsilon) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let run = |c: &Candidate| p.exec.execute_suite(c, &suite, &p.task, &p.cfg.timing);
    let base = match run(&p.baseline) {
        Ok(o) if o.is_ok() => o,
        Ok(o) => return fail(exit::EXECUTOR, format!("baseline {}: {}", o.status, o.diagnostics)),
        Err(e) => return fail(exit::EXECUTOR, e),
    };
    let cand = match run(&p.candidate) {
        Ok(o) if o.is_ok() => o,
        Ok(o) => return fail(exit::EXECUTOR, format!("candidate {}: {}", o.status, o.diagnostics)),
        Err(e) => return fail(exit::EXECUTOR, e),
    };
    match profile_outcome(&cand, &base.timings, &suite) {
        Some(perf) => {
            println!("correctness: not checked");
            print!("{}", render_perf(&perf));
            exit::OK
        }
        None => fail(exit::EXECUTOR, "timings incomplete"),
    }
}

pub fn cmd_report(a: &ReportArgs) -> i32 {
    let mut summaries = Vec::new();
    for path in &a.logs {
        match load_log(path) {
            Ok(log) => summaries.push(summarize(&log)),
            Err(e) => return fail(exit::CONFIG, format!("{}: {e}", path.display())),
        }
    }
    print!("{}", render_report(&summaries, a.format.into()));
    exit::OK
}
