//! Bit-exact round trips of the tensor and log formats.

use std::collections::BTreeMap;

use half::f16;
use proptest::prelude::*;

use kernelforge_core::log::{
    AgentRole, AgentTranscript, OptimizationLog, RoundRecord, RunErrorMarker, RunMetadata, TokenUsage,
};
use kernelforge_core::metrics::{CorrectnessReport, FailureKind, PerfReport, ShapePerf};
use kernelforge_core::tensor::{read_tensor, write_tensor, Tensor};

fn shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 1..4)
}

fn tensor() -> impl Strategy<Value = Tensor> {
    // Arbitrary bit patterns, so NaN payloads and subnormals are covered.
    // At most 5^3 elements; each tensor takes the prefix it needs.
    (shape(), any::<bool>(), prop::collection::vec(any::<u32>(), 125)).prop_map(|(s, half, bits)| {
        let n: usize = s.iter().product();
        if half {
            Tensor::from_f16(s, bits[..n].iter().map(|&b| f16::from_bits(b as u16)).collect()).unwrap()
        } else {
            Tensor::from_f32(s, bits[..n].iter().map(|&b| f32::from_bits(b)).collect()).unwrap()
        }
    })
}

fn speedup() -> impl Strategy<Value = f64> {
    0.01f64..100.0
}

fn perf() -> impl Strategy<Value = PerfReport> {
    prop::collection::vec((speedup(), speedup(), prop::collection::vec(speedup(), 0..5)), 1..4).prop_map(|shapes| {
        let per_shape: Vec<ShapePerf> = shapes
            .into_iter()
            .enumerate()
            .map(|(i, (b, c, samples))| ShapePerf {
                label: format!("[{i}, 64]"),
                baseline_us: b,
                candidate_us: c,
                speedup: b / c,
                samples,
            })
            .collect();
        let g = per_shape.iter().map(|s| s.speedup.ln()).sum::<f64>() / per_shape.len() as f64;
        PerfReport {
            per_shape,
            geo_mean: g.exp(),
        }
    })
}

fn report() -> impl Strategy<Value = CorrectnessReport> {
    (
        any::<bool>(),
        prop_oneof![Just(f64::INFINITY), 0f64..1.0],
        prop::collection::btree_map("[a-z]{1,6}#[0-9]", prop_oneof![Just(f64::INFINITY), 0f64..1.0], 0..4),
    )
        .prop_map(|(passed, max, per_case)| CorrectnessReport {
            passed,
            max_discrepancy: max,
            per_case: per_case.into_iter().collect::<BTreeMap<_, _>>(),
            failure_kind: if passed {
                FailureKind::None
            } else {
                FailureKind::Mismatch
            },
            worst_case: None,
            detail: (!passed).then(|| "tolerance exceeded".into()),
        })
}

fn record(round: u32) -> impl Strategy<Value = RoundRecord> {
    (
        any::<bool>(),
        perf(),
        report(),
        "\\PC{0,40}",
        proptest::option::of("\\PC{0,20}"),
    )
        .prop_map(move |(ok, perf, report, code, diagnostics)| {
            let ok = ok || round == 0;
            RoundRecord {
                round,
                code,
                correctness: ok,
                performance: ok.then_some(perf),
                report: Some(report),
                provenance: format!("round {round}"),
                diagnostics,
            }
        })
}

fn transcript(round: u32) -> impl Strategy<Value = AgentTranscript> {
    (
        prop_oneof![
            Just(AgentRole::Testing),
            Just(AgentRole::Planning),
            Just(AgentRole::Coding)
        ],
        "\\PC{0,60}",
        "\\PC{0,60}",
        proptest::option::of((0u64..10_000, 0u64..10_000)),
        1u32..4,
    )
        .prop_map(move |(role, prompt, response, usage, attempts)| AgentTranscript {
            role,
            round,
            prompt,
            response,
            usage: usage.map(|(p, c)| TokenUsage {
                prompt_tokens: p,
                completion_tokens: c,
            }),
            latency_ms: None,
            attempts,
            error: None,
        })
}

fn log() -> impl Strategy<Value = OptimizationLog> {
    (1u32..5, any::<bool>()).prop_flat_map(|(n, aborted)| {
        let records: Vec<_> = (0..n).map(record).collect();
        let transcripts: Vec<_> = (0..n).map(transcript).collect();
        (records, transcripts).prop_map(move |(records, agent_transcripts)| OptimizationLog {
            task_name: "silu_and_mul".into(),
            config_snapshot: serde_json::json!({"rounds": 5, "timing": {"warmup_runs": 20, "timed_runs": 100}}),
            metadata: RunMetadata {
                started_at: "2026-01-01T00:00:00Z".into(),
                tool_version: "kernelforge test".into(),
            },
            records,
            agent_transcripts,
            error: aborted.then(|| RunErrorMarker {
                round: n,
                kind: "scripting".into(),
                message: "no scripted coding response for round".into(),
            }),
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn tensors_round_trip_bit_exact(t in tensor()) {
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        let back = read_tensor(buf.as_slice()).unwrap();
        prop_assert!(back.bit_eq(&t));
        let mut again = Vec::new();
        write_tensor(&back, &mut again).unwrap();
        prop_assert_eq!(buf, again);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn logs_round_trip(l in log()) {
        let text = l.to_jsonl().unwrap();
        let back = OptimizationLog::from_jsonl(text.as_bytes()).unwrap();
        prop_assert_eq!(&back, &l);
        prop_assert_eq!(back.to_jsonl().unwrap(), text);
    }
}
