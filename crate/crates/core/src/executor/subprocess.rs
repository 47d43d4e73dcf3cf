use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{debug, info};
use wait_timeout::ChildExt;

use super::harness::{
    parse_timing_file, Binding, HarnessCase, HarnessManifest, HARNESS_EXIT_DEVICE, HARNESS_EXIT_LAUNCH,
    HARNESS_EXIT_MANIFEST, HARNESS_FORMAT,
};
use super::{hash_source, io_err, ExecError, Executor, RunOutcome, RunStatus, TimingProtocol};
use crate::log::Candidate;
use crate::metrics::TimingMap;
use crate::suite::{Outputs, TestCase, TestSuite, Value};
use crate::task::{KernelTask, ParamRole};
use crate::tensor::{load_tensor, save_tensor};

/// Timed runs on the device are serialized process-wide.
static DEVICE_LEASE: Mutex<()> = Mutex::new(());

const DEFAULT_COMPILE: &[&str] = &[
    "{compiler}",
    "{flags}",
    "-arch={arch}",
    "-o",
    "{bin}",
    "{harness}",
    "{source}",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubprocessConfig {
    pub compiler: String,
    #[serde(default)]
    pub flags: Vec<String>,
    #[serde(default = "default_arch")]
    pub arch: String,
    /// Host harness source or object linked with every candidate.
    pub harness: PathBuf,
    /// Argument template. Placeholders: {compiler} {flags} {arch} {bin}
    /// {harness} {source}. `{flags}` as a whole argument expands to all flags.
    #[serde(default)]
    pub compile_command: Vec<String>,
    #[serde(default = "default_launch")]
    pub launch: String,
}

fn default_arch() -> String {
    "sm_80".into()
}

fn default_launch() -> String {
    "kernel-declared".into()
}

impl SubprocessConfig {
    /// Resolves relative harness and compiler paths against `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let mut c = self.clone();
        c.harness = base.join(&self.harness);
        if self.compiler.contains('/') && Path::new(&self.compiler).is_relative() {
            c.compiler = base.join(&self.compiler).to_string_lossy().into_owned();
        }
        c
    }

    fn compile_args(&self, bin: &Path, source: &Path) -> Vec<String> {
        let template: Vec<String> = if self.compile_command.is_empty() {
            DEFAULT_COMPILE.iter().map(|s| s.to_string()).collect()
        } else {
            self.compile_command.clone()
        };
        let mut out = Vec::new();
        for arg in template {
            if arg == "{flags}" {
                out.extend(self.flags.iter().cloned());
                continue;
            }
            out.push(
                arg.replace("{compiler}", &self.compiler)
                    .replace("{arch}", &self.arch)
                    .replace("{bin}", &bin.to_string_lossy())
                    .replace("{harness}", &self.harness.to_string_lossy())
                    .replace("{source}", &source.to_string_lossy()),
            );
        }
        out
    }
}

pub struct SubprocessExecutor {
    cfg: SubprocessConfig,
    work_dir: PathBuf,
    compile_timeout: Duration,
    run_timeout: Duration,
}

enum Waited {
    Exited(ExitStatus),
    TimedOut,
}

fn run_logged(
    args: &[String],
    cwd: &Path,
    timeout: Duration,
    stdout: &Path,
    stderr: &Path,
) -> Result<Waited, ExecError> {
    let out = File::create(stdout).map_err(io_err(stdout))?;
    let err = File::create(stderr).map_err(io_err(stderr))?;
    let mut child = Command::new(&args[0])
        .args(&args[1..])
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .spawn()
        .map_err(|source| ExecError::Io {
            path: PathBuf::from(&args[0]),
            source,
        })?;
    match child.wait_timeout(timeout).map_err(io_err(Path::new(&args[0])))? {
        Some(status) => Ok(Waited::Exited(status)),
        None => {
            let _ = child.kill();
            let _ = child.wait();
            Ok(Waited::TimedOut)
        }
    }
}

fn read_lossy(p: &Path) -> String {
    std::fs::read(p)
        .map(|b| String::from_utf8_lossy(&b).into_owned())
        .unwrap_or_default()
}

fn describe_exit(code: Option<i32>) -> &'static str {
    match code {
        Some(HARNESS_EXIT_MANIFEST) => "manifest/file error",
        Some(HARNESS_EXIT_DEVICE) => "device/allocation error",
        Some(HARNESS_EXIT_LAUNCH) => "kernel launch error",
        Some(_) => "nonzero exit",
        None => "terminated by signal",
    }
}

impl SubprocessExecutor {
    pub fn new(cfg: SubprocessConfig, work_dir: PathBuf, compile_timeout: Duration, run_timeout: Duration) -> Self {
        Self {
            cfg,
            work_dir,
            compile_timeout,
            run_timeout,
        }
    }

    /// Compiles into `dir`, reusing a previous successful build of the same
    /// source. Returns the binary path or a failed outcome.
    fn compile(&self, dir: &Path, source: &str) -> Result<Result<PathBuf, RunOutcome>, ExecError> {
        let src = dir.join("candidate.cu");
        let bin = dir.join("candidate.bin");
        let stamp = dir.join("build.ok");
        if stamp.exists() && bin.exists() {
            return Ok(Ok(bin));
        }
        std::fs::write(&src, source).map_err(io_err(&src))?;
        let args = self.cfg.compile_args(&bin, &src);
        let cmdline = args.join(" ");
        info!(target: "kernelforge::executor", "compiling: {cmdline}");
        let (so, se) = (dir.join("compile.stdout"), dir.join("compile.stderr"));
        let waited = run_logged(&args, dir, self.compile_timeout, &so, &se)?;
        let mut diag = format!("$ {cmdline}\n");
        match waited {
            Waited::TimedOut => {
                diag.push_str(&format!("compile timed out after {:?}\n", self.compile_timeout));
                Ok(Err(RunOutcome::failure(RunStatus::Timeout, diag)))
            }
            Waited::Exited(st) => {
                diag.push_str(&format!(
                    "exit status: {}\n",
                    st.code().map_or("signal".into(), |c| c.to_string())
                ));
                diag.push_str(&read_lossy(&so));
                diag.push_str(&read_lossy(&se));
                if !st.success() || !bin.exists() {
                    return Ok(Err(RunOutcome::failure(RunStatus::CompileError, diag)));
                }
                std::fs::write(&stamp, diag).map_err(io_err(&stamp))?;
                Ok(Ok(bin))
            }
        }
    }

    fn write_case(
        &self,
        task: &KernelTask,
        case: &TestCase,
        idx: usize,
        run_dir: &Path,
    ) -> Result<HarnessCase, ExecError> {
        let mut bindings = Vec::with_capacity(task.signature.len());
        for p in &task.signature {
            let b = match p.role {
                ParamRole::Scalar => {
                    let value = case
                        .inputs
                        .get(&p.name)
                        .and_then(Value::as_scalar)
                        .or(p.value)
                        .ok_or_else(|| {
                            ExecError::Config(format!("case {} has no scalar `{}`", case.case_id, p.name))
                        })?;
                    Binding::Scalar {
                        name: p.name.clone(),
                        value,
                    }
                }
                ParamRole::Input => {
                    let t = case.inputs.get(&p.name).and_then(Value::as_tensor).ok_or_else(|| {
                        ExecError::Config(format!("case {} has no tensor `{}`", case.case_id, p.name))
                    })?;
                    let path = run_dir.join(format!("in_{idx}_{}.kft", p.name));
                    save_tensor(t, &path).map_err(|e| ExecError::Config(format!("writing {}: {e}", path.display())))?;
                    Binding::Input {
                        name: p.name.clone(),
                        path,
                        dtype: t.dtype(),
                        shape: t.shape().to_vec(),
                    }
                }
                ParamRole::Output => {
                    let t = case.expected.get(&p.name).ok_or_else(|| {
                        ExecError::Config(format!("case {} has no expected `{}`", case.case_id, p.name))
                    })?;
                    Binding::Output {
                        name: p.name.clone(),
                        path: run_dir.join(format!("out_{idx}_{}.kft", p.name)),
                        dtype: t.dtype(),
                        shape: t.shape().to_vec(),
                    }
                }
            };
            bindings.push(b);
        }
        Ok(HarnessCase {
            case_id: case.case_id.clone(),
            bindings,
        })
    }

    /// Collects outputs of one case; any missing or malformed file is an error message.
    fn collect_case(case: &HarnessCase) -> Result<Outputs, String> {
        let mut out = Outputs::new();
        for b in &case.bindings {
            if let Binding::Output {
                name,
                path,
                dtype,
                shape,
            } = b
            {
                let t = load_tensor(path).map_err(|e| format!("case {} output `{name}`: {e}", case.case_id))?;
                if t.dtype() != *dtype || t.shape() != shape.as_slice() {
                    return Err(format!(
                        "case {} output `{name}`: expected {dtype} {shape:?}, harness wrote {} {:?}",
                        case.case_id,
                        t.dtype(),
                        t.shape()
                    ));
                }
                out.insert(name.clone(), t);
            }
        }
        Ok(out)
    }
}

impl Executor for SubprocessExecutor {
    fn execute_suite(
        &self,
        candidate: &Candidate,
        suite: &TestSuite,
        task: &KernelTask,
        protocol: &TimingProtocol,
    ) -> Result<RunOutcome, ExecError> {
        protocol.validate()?;
        let hash = hash_source(&candidate.source);
        let dir = self.work_dir.join(&hash[..16]);
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let bin = match self.compile(&dir, &candidate.source)? {
            Ok(bin) => bin,
            Err(failed) => return Ok(failed),
        };

        let _lease = DEVICE_LEASE.lock().unwrap_or_else(|p| p.into_inner());
        let mut outcome = RunOutcome {
            status: RunStatus::Ok,
            outputs: Default::default(),
            timings: TimingMap::new(),
            diagnostics: String::new(),
        };
        for (si, label) in suite.shape_labels().into_iter().enumerate() {
            let run_dir = dir.join("run").join(format!("shape-{si}"));
            if run_dir.exists() {
                std::fs::remove_dir_all(&run_dir).map_err(io_err(&run_dir))?;
            }
            std::fs::create_dir_all(&run_dir).map_err(io_err(&run_dir))?;

            let cases: Vec<&TestCase> = suite.cases_for(label).collect();
            let harness_cases = cases
                .iter()
                .enumerate()
                .map(|(i, c)| self.write_case(task, c, i, &run_dir))
                .collect::<Result<Vec<_>, _>>()?;
            let manifest = HarnessManifest {
                format: HARNESS_FORMAT.into(),
                kernel: task.name.clone(),
                entry: task.entry.clone(),
                shape_label: label.to_string(),
                dims: cases[0].extents.clone(),
                warmup_runs: protocol.warmup_runs,
                timed_runs: protocol.timed_runs,
                launch: self.cfg.launch.clone(),
                timing_case: 0,
                timing_path: run_dir.join("timing.txt"),
                cases: harness_cases,
            };
            let mpath = run_dir.join("manifest.json");
            let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            std::fs::write(&mpath, text).map_err(io_err(&mpath))?;

            let args = vec![bin.to_string_lossy().into_owned(), mpath.to_string_lossy().into_owned()];
            debug!(target: "kernelforge::executor", "running {} for {label}", args.join(" "));
            let (so, se) = (run_dir.join("run.stdout"), run_dir.join("run.stderr"));
            let waited = run_logged(&args, &run_dir, self.run_timeout, &so, &se)?;
            let stderr = read_lossy(&se);
            match waited {
                Waited::TimedOut => {
                    return Ok(RunOutcome::failure(
                        RunStatus::Timeout,
                        format!("shape {label}: run timed out after {:?}\n{stderr}", self.run_timeout),
                    ))
                }
                Waited::Exited(st) if !st.success() => {
                    return Ok(RunOutcome::failure(
                        RunStatus::RuntimeError,
                        format!(
                            "shape {label}: harness {} (exit {})\n{stderr}",
                            describe_exit(st.code()),
                            st.code().map_or("signal".into(), |c| c.to_string())
                        ),
                    ))
                }
                Waited::Exited(_) => {}
            }
            if !stderr.is_empty() {
                outcome
                    .diagnostics
                    .push_str(&format!("shape {label} stderr:\n{stderr}"));
            }
            for hc in &manifest.cases {
                match Self::collect_case(hc) {
                    Ok(out) => {
                        outcome.outputs.insert(hc.case_id.clone(), out);
                    }
                    Err(msg) => return Ok(RunOutcome::failure(RunStatus::RuntimeError, msg)),
                }
            }
            let timing_text = match std::fs::read_to_string(&manifest.timing_path) {
                Ok(t) => t,
                Err(e) => {
                    return Ok(RunOutcome::failure(
                        RunStatus::RuntimeError,
                        format!("shape {label}: timing file unreadable: {e}"),
                    ))
                }
            };
            match parse_timing_file(&timing_text, Some((label, protocol.timed_runs))) {
                Ok(tf) => {
                    outcome.timings.insert(label.to_string(), tf.samples);
                }
                Err(e) => {
                    return Ok(RunOutcome::failure(
                        RunStatus::RuntimeError,
                        format!("shape {label}: malformed timing file: {e}"),
                    ))
                }
            }
        }
        Ok(outcome)
    }
}
