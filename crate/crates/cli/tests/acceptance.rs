//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use half::f16;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use kernelforge_core::agents::validate_outcome;
use kernelforge_core::executor::{Behavior, Executor, LatencyModel, SimEntry, SimulatedExecutor, TimingProtocol};
use kernelforge_core::log::{load_log, Candidate, OptimizationLog};
use kernelforge_core::metrics::{geo_mean, speedup, DiscrepancyMetric};
use kernelforge_core::oracles::{
    build_suite, builtin_task, default_task_epsilon, fused_add_rmsnorm_ref, generate_inputs_for,
    merge_attn_states_lse_ref, silu_and_mul_ref, InputGenSpec, OracleRegistry, FUSED_ADD_RMSNORM,
    MERGE_ATTN_STATES_LSE, SILU_AND_MUL,
};
use kernelforge_core::orchestrator::select_best;
use kernelforge_core::suite::Inputs;
use kernelforge_core::task::ShapeFamily;
use kernelforge_core::tensor::{read_tensor, write_tensor, DType, Tensor};

type Outcome = Result<String, String>;
type Criterion = fn() -> Outcome;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn near(got: f64, want: f64, tol: f64, what: &str) -> Result<(), String> {
    check((got - want).abs() <= tol, || {
        format!("{what}: got {got:.4}, want {want} ± {tol}")
    })
}

// ---------------------------------------------------------------- fixtures

const KERNELS: [&str; 3] = [MERGE_ATTN_STATES_LSE, FUSED_ADD_RMSNORM, SILU_AND_MUL];

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .canonicalize()
        .unwrap()
}

fn kf(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kernelforge"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn kernelforge")
}

fn optimize(cwd: &Path, kernel: &str, log: &str, script: Option<&Path>) -> Output {
    let task = fixtures().join(format!("tasks/{kernel}.toml"));
    let cfg = fixtures().join(format!("configs/{kernel}.toml"));
    let mut args = vec![
        "optimize".to_string(),
        "--task".into(),
        task.display().to_string(),
        "--config".into(),
        cfg.display().to_string(),
        "--backend".into(),
        "sim".into(),
        "--agents".into(),
        "scripted".into(),
        "--log".into(),
        log.into(),
    ];
    if let Some(s) = script {
        args.push("--script".into());
        args.push(s.display().to_string());
    }
    let args: Vec<&str> = args.iter().map(String::as_str).collect();
    kf(cwd, &args)
}

struct Runs {
    dir: tempfile::TempDir,
    exits: Vec<Option<i32>>,
    logs: Vec<Result<OptimizationLog, String>>,
}

/// One scripted, simulated run per kernel, shared by several criteria.
fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut exits = Vec::new();
        let mut logs = Vec::new();
        for k in KERNELS {
            let out = optimize(dir.path(), k, &format!("{k}.jsonl"), None);
            exits.push(out.status.code());
            logs.push(load_log(&dir.path().join(format!("{k}.jsonl"))).map_err(|e| e.to_string()));
        }
        Runs { dir, exits, logs }
    })
}

fn run_logs() -> Result<Vec<&'static OptimizationLog>, String> {
    runs().logs.iter().map(|l| l.as_ref().map_err(Clone::clone)).collect()
}

// ---------------------------------------------------------------- criteria

fn metrics_arithmetic() -> Outcome {
    let table2 = [(31.4, 24.9, 1.26), (41.3, 33.1, 1.25), (20.1, 13.8, 1.46)];
    let mut s2 = Vec::new();
    for (b, o, want) in table2 {
        let s = speedup(b, o).map_err(|e| e.to_string())?;
        near(s, want, 0.005, &format!("speedup({b}, {o})"))?;
        s2.push(s);
    }
    near(
        geo_mean(&[1.26, 1.25, 1.46]).unwrap(),
        1.32,
        0.01,
        "geo_mean(1.26, 1.25, 1.46)",
    )?;
    near(geo_mean(&s2).unwrap(), 1.32, 0.01, "geo_mean of computed speedups")?;

    #[rustfmt::skip]
    let table4 = [
        ("[512, 32, 256]", 32.9, 22.6, 1.46), ("[512, 40, 128]", 32.4, 20.6, 1.57),
        ("[768, 32, 256]", 32.5, 32.5, 1.00), ("[512, 64, 128]", 32.0, 28.2, 1.14),
        ("[256, 4096]", 24.3, 18.3, 1.33), ("[1024, 4096]", 34.0, 28.3, 1.20),
        ("[128, 11008]", 25.0, 19.4, 1.28), ("[512, 14336]", 46.1, 43.0, 1.07),
        ("[16, 4096]", 20.9, 14.2, 1.47), ("[32, 5120]", 20.3, 13.7, 1.49),
        ("[64, 8192]", 20.3, 13.5, 1.50), ("[16, 12288]", 20.4, 13.6, 1.50),
    ];
    for (label, b, o, want) in table4 {
        near(speedup(b, o).unwrap(), want, 0.01, label)?;
    }
    Ok(format!(
        "3 headline speedups, geo_mean {:.4}, 12 per-shape cells",
        geo_mean(&s2).unwrap()
    ))
}

fn widen(t: &Tensor) -> Vec<f64> {
    t.to_f32_vec().into_iter().map(f64::from).collect()
}

fn max_abs(a: &Tensor, b: &[f64]) -> f64 {
    a.to_f32_vec()
        .iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - y).abs())
        .fold(0.0, f64::max)
}

fn arg(inputs: &Inputs, name: &str) -> Tensor {
    inputs[name].as_tensor().unwrap().clone()
}

fn small(rng: &mut ChaCha8Rng, rank: usize) -> ShapeFamily {
    ShapeFamily::new(match rank {
        3 => vec![
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=16),
        ],
        _ => vec![rng.random_range(1..=8), rng.random_range(1..=16)],
    })
}

fn oracle_equivalence() -> Outcome {
    let spec = InputGenSpec::default();
    let mut worst = [0.0f64; 3];
    let mut rng = ChaCha8Rng::seed_from_u64(0xacce);
    for (k, id) in KERNELS.iter().enumerate() {
        let task = builtin_task(id, DType::F32).unwrap();
        for seed in 0..100 {
            let fam = small(&mut rng, task.shape_dims.len());
            let inp = generate_inputs_for(&task, &fam, seed, &spec).map_err(|e| e.to_string())?;
            let err = match *id {
                MERGE_ATTN_STATES_LSE => {
                    let (va, sa, vb, sb) = (arg(&inp, "v_a"), arg(&inp, "s_a"), arg(&inp, "v_b"), arg(&inp, "s_b"));
                    let (vo, so) = merge_attn_states_lse_ref(&va, &sa, &vb, &sb).unwrap();
                    let (va, sa, vb, sb) = (widen(&va), widen(&sa), widen(&vb), widen(&sb));
                    let dim = fam.extents[2];
                    let mut nv = Vec::new();
                    let mut ns = Vec::new();
                    for i in 0..sa.len() {
                        let (ea, eb) = (sa[i].exp(), sb[i].exp());
                        for d in 0..dim {
                            nv.push((ea * va[i * dim + d] + eb * vb[i * dim + d]) / (ea + eb));
                        }
                        ns.push((ea + eb).ln());
                    }
                    max_abs(&vo, &nv).max(max_abs(&so, &ns))
                }
                FUSED_ADD_RMSNORM => {
                    let (x, r, w) = (arg(&inp, "x"), arg(&inp, "residual"), arg(&inp, "weight"));
                    let eps = inp["eps"].as_scalar().unwrap();
                    let y = fused_add_rmsnorm_ref(&x, &r, &w, eps).unwrap();
                    let (x, r, w) = (widen(&x), widen(&r), widen(&w));
                    let d = w.len();
                    let mut ny = Vec::new();
                    for row in 0..x.len() / d {
                        let h: Vec<f64> = (0..d).map(|j| x[row * d + j] + r[row * d + j]).collect();
                        let rms = (h.iter().map(|v| v * v).sum::<f64>() / d as f64 + eps as f64).sqrt();
                        ny.extend(h.iter().zip(&w).map(|(v, wj)| v / rms * wj));
                    }
                    max_abs(&y, &ny)
                }
                _ => {
                    let (x, g) = (arg(&inp, "x"), arg(&inp, "g"));
                    let out = silu_and_mul_ref(&x, &g).unwrap();
                    let n: Vec<f64> = widen(&x)
                        .iter()
                        .zip(widen(&g))
                        .map(|(z, gg)| z / (1.0 + (-z).exp()) * gg)
                        .collect();
                    max_abs(&out, &n)
                }
            };
            worst[k] = worst[k].max(err);
        }
        check(worst[k] <= 1e-6, || format!("{id}: max-abs {:e} > 1e-6", worst[k]))?;
    }
    Ok(format!(
        "100 seeds each; worst max-abs {:.1e} / {:.1e} / {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

fn oracle_properties() -> Outcome {
    let spec = InputGenSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e0);
    let merge = builtin_task(MERGE_ATTN_STATES_LSE, DType::F32).unwrap();
    let rms = builtin_task(FUSED_ADD_RMSNORM, DType::F32).unwrap();
    let silu = builtin_task(SILU_AND_MUL, DType::F32).unwrap();
    for seed in 0..100 {
        // merge: convex bound, argument swap, logaddexp
        let fam = small(&mut rng, 3);
        let inp = generate_inputs_for(&merge, &fam, seed, &spec).unwrap();
        let (va, sa, vb, sb) = (arg(&inp, "v_a"), arg(&inp, "s_a"), arg(&inp, "v_b"), arg(&inp, "s_b"));
        let (vo, so) = merge_attn_states_lse_ref(&va, &sa, &vb, &sb).unwrap();
        let (vo2, so2) = merge_attn_states_lse_ref(&vb, &sb, &va, &sa).unwrap();
        let (a, b, o) = (va.to_f32_vec(), vb.to_f32_vec(), vo.to_f32_vec());
        for i in 0..o.len() {
            check(o[i] >= a[i].min(b[i]) - 1e-6 && o[i] <= a[i].max(b[i]) + 1e-6, || {
                format!("merge seed {seed}: convex bound violated at {i}")
            })?;
        }
        check(
            o.iter().zip(vo2.to_f32_vec()).all(|(x, y)| (x - y).abs() <= 1e-6),
            || format!("merge seed {seed}: swap"),
        )?;
        check(
            so.to_f32_vec()
                .iter()
                .zip(so2.to_f32_vec())
                .all(|(x, y)| (x - y).abs() <= 1e-6),
            || format!("merge seed {seed}: score swap"),
        )?;
        let (sa, sb) = (widen(&sa), widen(&sb));
        for (i, s) in so.to_f32_vec().iter().enumerate() {
            let m = sa[i].max(sb[i]);
            let lae = m + ((sa[i] - m).exp() + (sb[i] - m).exp()).ln();
            check((*s as f64 - lae).abs() <= 1e-6, || {
                format!("merge seed {seed}: logaddexp")
            })?;
        }

        // rmsnorm: unit RMS with eps = 0 and w = 1; positive-scale invariance
        let fam = small(&mut rng, 2);
        let (rows, d) = (fam.extents[0], fam.extents[1]);
        let inp = generate_inputs_for(&rms, &fam, seed, &spec).unwrap();
        let (x, r, w) = (arg(&inp, "x"), arg(&inp, "residual"), arg(&inp, "weight"));
        let ones = Tensor::from_f32(vec![d], vec![1.0; d]).unwrap();
        let y = fused_add_rmsnorm_ref(&x, &r, &ones, 0.0).unwrap().to_f32_vec();
        for row in 0..rows {
            let ms = y[row * d..(row + 1) * d]
                .iter()
                .map(|v| (*v as f64).powi(2))
                .sum::<f64>()
                / d as f64;
            check((ms.sqrt() - 1.0).abs() <= 1e-5, || {
                format!("rmsnorm seed {seed}: rms {}", ms.sqrt())
            })?;
        }
        let c: f32 = rng.random_range(0.1..10.0);
        let scale =
            |t: &Tensor| Tensor::from_f32(t.shape().to_vec(), t.to_f32_vec().iter().map(|v| v * c).collect()).unwrap();
        let y1 = fused_add_rmsnorm_ref(&x, &r, &w, 0.0).unwrap().to_f32_vec();
        let y2 = fused_add_rmsnorm_ref(&scale(&x), &scale(&r), &w, 0.0)
            .unwrap()
            .to_f32_vec();
        check(y1.iter().zip(&y2).all(|(p, q)| (p - q).abs() <= 1e-5), || {
            format!("rmsnorm seed {seed}: scale {c}")
        })?;

        // silu: zero at zero exactly; linear in g
        let fam = small(&mut rng, 2);
        let inp = generate_inputs_for(&silu, &fam, seed, &spec).unwrap();
        let g2 = generate_inputs_for(&silu, &fam, seed + 10_000, &spec).unwrap();
        let (x, g1, g2) = (arg(&inp, "x"), arg(&inp, "g"), arg(&g2, "g"));
        let mut xz = x.to_f32_vec();
        let at = rng.random_range(0..xz.len());
        xz[at] = 0.0;
        let xz = Tensor::from_f32(x.shape().to_vec(), xz).unwrap();
        check(silu_and_mul_ref(&xz, &g1).unwrap().get_f32(at) == 0.0, || {
            format!("silu seed {seed}: silu(0) != 0")
        })?;
        let gs = Tensor::from_f32(
            g1.shape().to_vec(),
            g1.to_f32_vec()
                .iter()
                .zip(g2.to_f32_vec())
                .map(|(a, b)| a + b)
                .collect(),
        )
        .unwrap();
        let lhs = silu_and_mul_ref(&x, &gs).unwrap().to_f32_vec();
        let (r1, r2) = (
            silu_and_mul_ref(&x, &g1).unwrap().to_f32_vec(),
            silu_and_mul_ref(&x, &g2).unwrap().to_f32_vec(),
        );
        check((0..lhs.len()).all(|i| (lhs[i] - (r1[i] + r2[i])).abs() <= 1e-5), || {
            format!("silu seed {seed}: linearity")
        })?;
    }
    Ok("100 instances per property".into())
}

/// Speedup column of the report's "Average" row.
fn average_speedup(report: &str) -> Option<f64> {
    let line = report.lines().find(|l| l.trim_start().starts_with("Average"))?;
    line.split_whitespace()
        .filter_map(|t| t.strip_suffix('×'))
        .next_back()
        .and_then(|v| v.parse().ok())
}

fn end_to_end() -> Outcome {
    let r = runs();
    check(r.exits.iter().all(|c| *c == Some(0)), || {
        format!("exit statuses {:?}", r.exits)
    })?;
    let logs = run_logs()?;
    let want = [1.26, 1.25, 1.46];
    let mut got = Vec::new();
    for (log, w) in logs.iter().zip(want) {
        check(log.records.len() == 6, || {
            format!("{}: {} records", log.task_name, log.records.len())
        })?;
        let g = select_best(log).geo_mean().unwrap_or(f64::NAN);
        near(g, w, 0.005, &format!("{} select_best geo_mean", log.task_name))?;
        got.push(g);
    }
    let names: Vec<String> = KERNELS.iter().map(|k| format!("{k}.jsonl")).collect();
    let mut args = vec!["report"];
    args.extend(names.iter().map(String::as_str));
    let out = kf(r.dir.path(), &args);
    check(out.status.code() == Some(0), || {
        format!("report exit {:?}", out.status.code())
    })?;
    let text = String::from_utf8_lossy(&out.stdout);
    let avg = average_speedup(&text).ok_or_else(|| format!("no Average row in report:\n{text}"))?;
    near(avg, 1.32, 0.01, "report Average")?;
    Ok(format!(
        "exit 0 ×3, 6 records, best {:.3}/{:.3}/{:.3}, Average {avg:.2}×",
        got[0], got[1], got[2]
    ))
}

fn correctness_gate() -> Outcome {
    // Scripted runs: round 3 perturbs by 10 ε, round 5 by 0.1 ε.
    for log in run_logs()? {
        let r3 = &log.records[3];
        let r5 = &log.records[5];
        check(!r3.correctness, || {
            format!("{}: 10ε round recorded correct", log.task_name)
        })?;
        check(r5.correctness, || {
            format!("{}: 0.1ε round recorded incorrect", log.task_name)
        })?;
        check(select_best(log).round != 3, || {
            format!("{}: select_best returned the 10ε round", log.task_name)
        })?;
    }
    // Direct check against the simulated executor for every kernel.
    let protocol = TimingProtocol::default();
    for id in KERNELS {
        let mut task = builtin_task(id, DType::F16).unwrap();
        task.shape_families.truncate(1);
        task.shape_families[0] = ShapeFamily::new(match id {
            MERGE_ATTN_STATES_LSE => vec![8, 4, 32],
            _ => vec![8, 256],
        });
        let eps = default_task_epsilon(&task);
        let suite = build_suite(
            &task,
            &[0, 1],
            eps,
            DiscrepancyMetric::default(),
            &OracleRegistry::builtin(),
            &Default::default(),
        )
        .map_err(|e| e.to_string())?;
        let mut exec = SimulatedExecutor::new();
        for (k, src) in [(10.0, "ten"), (0.1, "tenth")] {
            exec.register(
                src,
                SimEntry {
                    behavior: Behavior::Perturb { eps_multiple: k },
                    latency: LatencyModel::uniform(10.0),
                },
            );
        }
        let verdict = |src: &str| -> Result<bool, String> {
            let c = Candidate {
                round: 1,
                source: src.into(),
                provenance: String::new(),
            };
            let out = exec
                .execute_suite(&c, &suite, &task, &protocol)
                .map_err(|e| e.to_string())?;
            Ok(validate_outcome(&out, &suite).passed)
        };
        check(!verdict("ten")?, || format!("{id}: 10ε passed"))?;
        check(verdict("tenth")?, || format!("{id}: 0.1ε failed"))?;
    }
    Ok("10ε rejected and never selected; 0.1ε accepted (3 kernels, scripted and direct)".into())
}

fn strip_meta(text: &str) -> String {
    text.lines()
        .filter(|l| !l.contains(r#""type":"meta""#))
        .collect::<Vec<_>>()
        .join("\n")
}

fn determinism() -> Outcome {
    // Two identical runs, same relative log path in separate directories.
    let mut texts = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let out = optimize(dir.path(), SILU_AND_MUL, "run.jsonl", None);
        check(out.status.code() == Some(0), || format!("exit {:?}", out.status.code()))?;
        texts.push(std::fs::read_to_string(dir.path().join("run.jsonl")).unwrap());
    }
    let meta_lines = texts[0].lines().filter(|l| l.contains(r#""type":"meta""#)).count();
    check(meta_lines == 1, || format!("{meta_lines} meta lines"))?;
    check(strip_meta(&texts[0]) == strip_meta(&texts[1]), || {
        "logs differ outside the metadata block".into()
    })?;

    // 1000 random tensors, raw bit patterns, half of them f16.
    let mut rng = ChaCha8Rng::seed_from_u64(0xdead);
    let mut n16 = 0;
    for _ in 0..1000 {
        let rank = rng.random_range(1..=4);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=6)).collect();
        let n: usize = shape.iter().product();
        let t = if rng.random_bool(0.5) {
            n16 += 1;
            Tensor::from_f16(shape, (0..n).map(|_| f16::from_bits(rng.random())).collect()).unwrap()
        } else {
            Tensor::from_f32(shape, (0..n).map(|_| f32::from_bits(rng.random())).collect()).unwrap()
        };
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).map_err(|e| e.to_string())?;
        let back = read_tensor(buf.as_slice()).map_err(|e| e.to_string())?;
        check(back.bit_eq(&t), || "tensor round trip not bit-exact".into())?;
        let mut again = Vec::new();
        write_tensor(&back, &mut again).unwrap();
        check(again == buf, || "tensor re-encoding differs".into())?;
    }

    // Logs: parse and re-encode every log written above.
    for (i, text) in texts.iter().enumerate() {
        let log = OptimizationLog::from_jsonl(text.as_bytes()).map_err(|e| e.to_string())?;
        check(log.to_jsonl().map_err(|e| e.to_string())? == *text, || {
            format!("log {i} re-encoding differs")
        })?;
    }
    for log in run_logs()? {
        let text = log.to_jsonl().unwrap();
        let back = OptimizationLog::from_jsonl(text.as_bytes()).unwrap();
        check(&back == log, || format!("{} log round trip differs", log.task_name))?;
    }
    Ok(format!(
        "logs equal modulo meta; 1000 tensors ({n16} f16) bit-exact; 5 logs round-trip"
    ))
}

fn failure_handling() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let full = std::fs::read_to_string(fixtures().join("scripts/silu_and_mul.toml")).unwrap();
    let kept: Vec<&str> = full
        .split("[[entry]]")
        .filter(|e| !(e.contains("role = \"coding\"") && e.contains("round = 3\n")))
        .collect();
    check(kept.len() + 1 == full.split("[[entry]]").count(), || {
        "could not drop the round-3 coding entry".into()
    })?;
    let script = dir.path().join("missing.toml");
    std::fs::write(&script, kept.join("[[entry]]")).unwrap();

    let out = optimize(dir.path(), SILU_AND_MUL, "fail.jsonl", Some(&script));
    check(out.status.code() == Some(3), || {
        format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
    })?;
    let log = load_log(&dir.path().join("fail.jsonl")).map_err(|e| format!("log not loadable: {e}"))?;
    let rounds: Vec<u32> = log.records.iter().map(|r| r.round).collect();
    check(rounds == [0, 1, 2], || format!("records {rounds:?}"))?;
    let marker = log.error.as_ref().ok_or("no error marker")?;
    check(marker.round == 3 && marker.kind == "scripting", || {
        format!("marker {marker:?}")
    })?;
    Ok(format!(
        "exit 3; records 0..2 + marker ({}: {})",
        marker.kind, marker.message
    ))
}

fn main() {
    let criteria: [(&str, Criterion); 7] = [
        ("metrics arithmetic", metrics_arithmetic),
        ("oracle equivalence", oracle_equivalence),
        ("oracle property suite", oracle_properties),
        ("end-to-end scripted run", end_to_end),
        ("correctness gate", correctness_gate),
        ("determinism", determinism),
        ("failure handling", failure_handling),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
