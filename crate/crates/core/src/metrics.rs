//! Discrepancy, correctness decision, speedup and geometric-mean aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::suite::{Outputs, TestSuite};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("cannot compare tensors: {0}")]
    Comparison(String),
    #[error("timings must be positive and finite (baseline {base} us, candidate {cand} us)")]
    Measurement { base: f64, cand: f64 },
    #[error("cannot aggregate speedups: {0}")]
    Aggregation(String),
    #[error("no timing samples for shape {0}")]
    MissingTiming(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    /// max_i |a_i - b_i|
    #[default]
    MaxAbs,
    /// max_i |a_i - b_i| / max(|a_i|, |b_i|, rel_floor)
    MaxRelAbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyMetric {
    pub kind: MetricKind,
    #[serde(default = "default_rel_floor")]
    pub rel_floor: f32,
}

fn default_rel_floor() -> f32 {
    1e-6
}

impl Default for DiscrepancyMetric {
    fn default() -> Self {
        Self {
            kind: MetricKind::MaxAbs,
            rel_floor: default_rel_floor(),
        }
    }
}

impl DiscrepancyMetric {
    pub fn new(kind: MetricKind, rel_floor: f32) -> Result<Self, MetricError> {
        if !(rel_floor > 0.0 && rel_floor.is_finite()) {
            return Err(MetricError::Comparison(format!(
                "rel_floor must be positive, got {rel_floor}"
            )));
        }
        Ok(Self { kind, rel_floor })
    }
}

/// Default tolerance for an output dtype.
pub fn default_epsilon(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-5,
        DType::F16 => 2e-2,
    }
}

/// Element-wise discrepancy between two same-shaped tensors, evaluated in
/// f32. Any non-finite element on either side yields `+inf`.
pub fn discrepancy(a: &Tensor, b: &Tensor, metric: &DiscrepancyMetric) -> Result<f64, MetricError> {
    if a.shape() != b.shape() {
        return Err(MetricError::Comparison(format!(
            "shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.dtype() != b.dtype() {
        return Err(MetricError::Comparison(format!("dtype {} vs {}", a.dtype(), b.dtype())));
    }
    let mut worst = 0.0f32;
    for i in 0..a.len() {
        let (x, y) = (a.get_f32(i), b.get_f32(i));
        if !x.is_finite() || !y.is_finite() {
            return Ok(f64::INFINITY);
        }
        let diff = (x - y).abs();
        let d = match metric.kind {
            MetricKind::MaxAbs => diff,
            MetricKind::MaxRelAbs => diff / x.abs().max(y.abs()).max(metric.rel_floor),
        };
        if d > worst || d.is_nan() {
            worst = d;
        }
    }
    if worst.is_nan() {
        return Ok(f64::INFINITY);
    }
    Ok(worst as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    None,
    Mismatch,
    Compile,
    Runtime,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectnessReport {
    pub passed: bool,
    #[serde(with = "nonfinite")]
    pub max_discrepancy: f64,
    #[serde(with = "nonfinite_map")]
    pub per_case: BTreeMap<String, f64>,
    pub failure_kind: FailureKind,
    /// Case holding the largest discrepancy, if any case ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub worst_case: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

impl CorrectnessReport {
    pub fn failed(kind: FailureKind, detail: impl Into<String>) -> Self {
        Self {
            passed: false,
            max_discrepancy: f64::INFINITY,
            per_case: BTreeMap::new(),
            failure_kind: kind,
            worst_case: None,
            detail: Some(detail.into()),
        }
    }
}

/// Decides correctness of `actual` (case id -> named outputs) against the
/// suite: the maximum discrepancy over every case and output must not
/// exceed the suite tolerance.
pub fn correctness_pass(suite: &TestSuite, actual: &BTreeMap<String, Outputs>) -> CorrectnessReport {
    let mut per_case = BTreeMap::new();
    let mut max_d = 0.0f64;
    let mut worst_case = None;
    let mut mismatch_detail = None;

    for case in suite.cases() {
        let Some(outputs) = actual.get(&case.case_id) else {
            let mut r =
                CorrectnessReport::failed(FailureKind::Runtime, format!("no outputs for case {}", case.case_id));
            r.worst_case = Some(case.case_id.clone());
            r.per_case = per_case;
            return r;
        };
        let mut case_d = 0.0f64;
        for (name, expected) in &case.expected {
            let Some(got) = outputs.get(name) else {
                let mut r = CorrectnessReport::failed(
                    FailureKind::Runtime,
                    format!("case {} is missing output `{name}`", case.case_id),
                );
                r.worst_case = Some(case.case_id.clone());
                r.per_case = per_case;
                return r;
            };
            let d = match discrepancy(got, expected, &suite.metric) {
                Ok(d) => d,
                Err(e) => {
                    mismatch_detail.get_or_insert_with(|| format!("case {} output `{name}`: {e}", case.case_id));
                    f64::INFINITY
                }
            };
            case_d = case_d.max(d);
        }
        if worst_case.is_none() || case_d > max_d {
            max_d = case_d;
            worst_case = Some(case.case_id.clone());
        }
        per_case.insert(case.case_id.clone(), case_d);
    }

    let passed = max_d <= suite.epsilon;
    CorrectnessReport {
        passed,
        max_discrepancy: max_d,
        per_case,
        failure_kind: if passed {
            FailureKind::None
        } else {
            FailureKind::Mismatch
        },
        detail: if passed { None } else { mismatch_detail },
        worst_case,
    }
}

/// Per-input speedup: baseline time over candidate time.
pub fn speedup(tau_base: f64, tau_cand: f64) -> Result<f64, MetricError> {
    let ok = |t: f64| t.is_finite() && t > 0.0;
    if !ok(tau_base) || !ok(tau_cand) {
        return Err(MetricError::Measurement {
            base: tau_base,
            cand: tau_cand,
        });
    }
    Ok(tau_base / tau_cand)
}

/// Geometric mean, evaluated in log space.
pub fn geo_mean(ratios: &[f64]) -> Result<f64, MetricError> {
    if ratios.is_empty() {
        return Err(MetricError::Aggregation("empty list".into()));
    }
    let mut log_sum = 0.0;
    for &r in ratios {
        if !(r.is_finite() && r > 0.0) {
            return Err(MetricError::Aggregation(format!("non-positive ratio {r}")));
        }
        log_sum += r.ln();
    }
    Ok((log_sum / ratios.len() as f64).exp())
}

pub fn arithmetic_mean(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        None
    } else {
        Some(samples.iter().sum::<f64>() / samples.len() as f64)
    }
}

/// Timing samples in microseconds, keyed by shape label.
pub type TimingMap = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapePerf {
    pub label: String,
    pub baseline_us: f64,
    pub candidate_us: f64,
    pub speedup: f64,
    /// Candidate repetition times, warm-up excluded.
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub per_shape: Vec<ShapePerf>,
    pub geo_mean: f64,
}

impl PerfReport {
    /// Builds a report over `labels` (in order) from per-shape means of the
    /// two sample sets.
    pub fn compute(labels: &[&str], baseline: &TimingMap, candidate: &TimingMap) -> Result<Self, MetricError> {
        let mut per_shape = Vec::with_capacity(labels.len());
        for &label in labels {
            let base = baseline
                .get(label)
                .and_then(|s| arithmetic_mean(s))
                .ok_or_else(|| MetricError::MissingTiming(label.into()))?;
            let cand_samples = candidate
                .get(label)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| MetricError::MissingTiming(label.into()))?;
            let cand = arithmetic_mean(cand_samples).unwrap_or_default();
            per_shape.push(ShapePerf {
                label: label.into(),
                baseline_us: base,
                candidate_us: cand,
                speedup: speedup(base, cand)?,
                samples: cand_samples.clone(),
            });
        }
        let ratios: Vec<f64> = per_shape.iter().map(|s| s.speedup).collect();
        Ok(Self {
            geo_mean: geo_mean(&ratios)?,
            per_shape,
        })
    }

    pub fn speedup_for(&self, label: &str) -> Option<f64> {
        self.per_shape.iter().find(|s| s.label == label).map(|s| s.speedup)
    }

    pub fn speedups(&self) -> BTreeMap<&str, f64> {
        self.per_shape.iter().map(|s| (s.label.as_str(), s.speedup)).collect()
    }
}

/// Serializes f64 as a JSON number when finite, else as "inf" / "-inf" / "nan".
pub(crate) mod nonfinite {
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(serde::Deserialize)]
    #[serde(untagged)]
    pub(super) enum Repr {
        Num(f64),
        Str(String),
    }

    pub(super) fn encode<S: Serializer>(v: f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub(super) fn decode<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(n) => Ok(n),
            Repr::Str(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("invalid number `{other}`"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        encode(*v, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        decode(Repr::deserialize(d)?)
    }
}

pub(crate) mod nonfinite_map {
    use std::collections::BTreeMap;

    use serde::ser::SerializeMap;
    use serde::{Deserialize, Deserializer, Serializer};

    use super::nonfinite::{decode, encode, Repr};

    struct Wrap(f64);
    impl serde::Serialize for Wrap {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            encode(self.0, s)
        }
    }

    pub fn serialize<S: Serializer>(m: &BTreeMap<String, f64>, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(m.len()))?;
        for (k, v) in m {
            map.serialize_entry(k, &Wrap(*v))?;
        }
        map.end()
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, f64>, D::Error> {
        BTreeMap::<String, Repr>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| decode(v).map(|v| (k, v)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::suite::{Inputs, TestCase};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn t(data: &[f32]) -> Tensor {
        Tensor::from_f32(vec![data.len()], data.to_vec()).unwrap()
    }

    fn suite_with(expected: &[(&str, &[f32])], eps: f64) -> TestSuite {
        let cases = expected
            .iter()
            .map(|(id, v)| TestCase {
                case_id: (*id).into(),
                inputs: Inputs::new(),
                expected: [("out".to_string(), t(v))].into_iter().collect(),
                shape_label: "[1]".into(),
                extents: vec![v.len()],
                seed: 0,
            })
            .collect();
        TestSuite::new(cases, eps, DiscrepancyMetric::default()).unwrap()
    }

    fn actual(pairs: &[(&str, &[f32])]) -> BTreeMap<String, Outputs> {
        pairs
            .iter()
            .map(|(id, v)| ((*id).to_string(), [("out".to_string(), t(v))].into_iter().collect()))
            .collect()
    }

    #[test]
    fn identical_is_zero() {
        let a = t(&[1.0, -2.0, 3.5]);
        assert_eq!(discrepancy(&a, &a.clone(), &DiscrepancyMetric::default()).unwrap(), 0.0);
    }

    #[test]
    fn single_element_max_abs() {
        let d = discrepancy(&t(&[1.0]), &t(&[1.5]), &DiscrepancyMetric::default()).unwrap();
        assert_eq!(d, 0.5);
    }

    #[test]
    fn signed_zero_counts_as_equal() {
        assert_eq!(
            discrepancy(&t(&[0.0]), &t(&[-0.0]), &DiscrepancyMetric::default()).unwrap(),
            0.0
        );
    }

    #[test]
    fn nan_fails_closed() {
        let nan = t(&[f32::NAN]);
        assert_eq!(
            discrepancy(&nan, &nan, &DiscrepancyMetric::default()).unwrap(),
            f64::INFINITY
        );
        let inf = t(&[f32::INFINITY]);
        assert_eq!(
            discrepancy(&inf, &inf, &DiscrepancyMetric::default()).unwrap(),
            f64::INFINITY
        );
    }

    #[test]
    fn brute_force_3x3() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let a: Vec<f32> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut expected = 0.0f32;
        for i in 0..9 {
            let d = (a[i] - b[i]).abs();
            if d > expected {
                expected = d;
            }
        }
        let ta = Tensor::from_f32(vec![3, 3], a).unwrap();
        let tb = Tensor::from_f32(vec![3, 3], b).unwrap();
        assert_eq!(
            discrepancy(&ta, &tb, &DiscrepancyMetric::default()).unwrap(),
            expected as f64
        );
    }

    #[test]
    fn relative_metric_uses_floor() {
        let m = DiscrepancyMetric::new(MetricKind::MaxRelAbs, 0.5).unwrap();
        // |0.1 - 0.2| / max(0.1, 0.2, 0.5) = 0.2
        let d = discrepancy(&t(&[0.1]), &t(&[0.2]), &m).unwrap();
        assert_relative_eq!(d, 0.2, max_relative = 1e-6);
        let d = discrepancy(&t(&[2.0]), &t(&[3.0]), &m).unwrap();
        assert_relative_eq!(d, 1.0 / 3.0, max_relative = 1e-6);
        assert!(DiscrepancyMetric::new(MetricKind::MaxRelAbs, 0.0).is_err());
    }

    #[test]
    fn shape_and_dtype_mismatch_error() {
        let m = DiscrepancyMetric::default();
        assert!(discrepancy(&t(&[1.0]), &t(&[1.0, 2.0]), &m).is_err());
        let h = Tensor::from_f32_as(DType::F16, vec![1], vec![1.0]).unwrap();
        assert!(discrepancy(&t(&[1.0]), &h, &m).is_err());
    }

    #[test]
    fn below_tolerance_passes() {
        let s = suite_with(&[("a", &[1.0]), ("b", &[2.0])], 1e-3);
        let r = correctness_pass(&s, &actual(&[("a", &[1.0]), ("b", &[2.0001])]));
        assert!(r.passed);
        assert_eq!(r.failure_kind, FailureKind::None);
        assert_eq!(r.per_case["a"], 0.0);
        assert!(r.per_case["b"] < 1e-3);
    }

    #[test]
    fn above_tolerance_fails() {
        let s = suite_with(&[("a", &[1.0])], 1e-3);
        let r = correctness_pass(&s, &actual(&[("a", &[1.002])]));
        assert!(!r.passed);
        assert_eq!(r.failure_kind, FailureKind::Mismatch);
        assert_relative_eq!(r.max_discrepancy, 2e-3, max_relative = 1e-3);
        assert_eq!(r.worst_case.as_deref(), Some("a"));
    }

    #[test]
    fn exact_match_passes_at_zero_tolerance() {
        let s = suite_with(&[("a", &[1.0, 2.0]), ("b", &[3.0])], 0.0);
        let r = correctness_pass(&s, &actual(&[("a", &[1.0, 2.0]), ("b", &[3.0])]));
        assert!(r.passed);
        assert_eq!(r.max_discrepancy, 0.0);
    }

    #[test]
    fn missing_case_is_runtime_failure() {
        let s = suite_with(&[("a", &[1.0]), ("b", &[2.0])], 1.0);
        let r = correctness_pass(&s, &actual(&[("a", &[1.0])]));
        assert!(!r.passed);
        assert_eq!(r.failure_kind, FailureKind::Runtime);
        assert_eq!(r.worst_case.as_deref(), Some("b"));
    }

    #[test]
    fn wrong_shape_is_mismatch() {
        let s = suite_with(&[("a", &[1.0])], 1.0);
        let r = correctness_pass(&s, &actual(&[("a", &[1.0, 1.0])]));
        assert!(!r.passed);
        assert_eq!(r.failure_kind, FailureKind::Mismatch);
        assert!(r.max_discrepancy.is_infinite());
    }

    #[test]
    fn table_speedups() {
        assert!((speedup(31.4, 24.9).unwrap() - 1.26).abs() <= 0.005);
        assert!((speedup(32.9, 22.6).unwrap() - 1.46).abs() <= 0.005);
        assert_eq!(speedup(10.0, 10.0).unwrap(), 1.0);
        assert!(speedup(0.0, 1.0).is_err());
        assert!(speedup(1.0, -1.0).is_err());
    }

    #[test]
    fn geo_mean_examples() {
        assert_relative_eq!(geo_mean(&[2.0, 0.5]).unwrap(), 1.0, max_relative = 1e-12);
        assert!((geo_mean(&[1.26, 1.25, 1.46]).unwrap() - 1.32).abs() <= 0.01);
        assert!(geo_mean(&[]).is_err());
        assert!(geo_mean(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn geo_mean_matches_direct_product() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..50).map(|_| rng.random_range(0.2..5.0)).collect();
        let direct = xs.iter().product::<f64>().powf(1.0 / xs.len() as f64);
        assert_relative_eq!(geo_mean(&xs).unwrap(), direct, max_relative = 1e-12);
    }

    #[test]
    fn perf_report_from_timings() {
        let base: TimingMap = [("A".to_string(), vec![32.9; 4])].into_iter().collect();
        let cand: TimingMap = [("A".to_string(), vec![22.6; 4])].into_iter().collect();
        let r = PerfReport::compute(&["A"], &base, &cand).unwrap();
        assert!((r.speedup_for("A").unwrap() - 1.46).abs() <= 0.005);
        assert_eq!(r.geo_mean, r.per_shape[0].speedup);
        assert!(PerfReport::compute(&["B"], &base, &cand).is_err());
    }

    #[test]
    fn report_serializes_infinite_discrepancy() {
        let r = CorrectnessReport::failed(FailureKind::Compile, "boom");
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"inf\""));
        let back: CorrectnessReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    fn ratio() -> impl Strategy<Value = f64> {
        (1e-3f64..1e3).prop_map(|x| x)
    }

    proptest! {
        #[test]
        fn geo_mean_singleton(s in ratio()) {
            prop_assert!((geo_mean(&[s]).unwrap() - s).abs() <= 1e-12 * s);
        }

        #[test]
        fn geo_mean_replication_invariant(xs in prop::collection::vec(ratio(), 1..20), k in 1usize..5) {
            let rep: Vec<f64> = xs.iter().cycle().take(xs.len() * k).copied().collect();
            let a = geo_mean(&xs).unwrap();
            prop_assert!((geo_mean(&rep).unwrap() - a).abs() <= 1e-12 * a.max(1.0) * 10.0);
        }

        #[test]
        fn geo_mean_reciprocal_product_is_one(xs in prop::collection::vec(ratio(), 1..20)) {
            let inv: Vec<f64> = xs.iter().map(|x| 1.0 / x).collect();
            let p = geo_mean(&xs).unwrap() * geo_mean(&inv).unwrap();
            prop_assert!((p - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn speedup_antisymmetric(a in ratio(), b in ratio()) {
            let p = speedup(a, b).unwrap() * speedup(b, a).unwrap();
            prop_assert!((p - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn discrepancy_symmetric_nonnegative(
            xs in prop::collection::vec(-100f32..100.0, 1..32),
            noise in prop::collection::vec(-1f32..1.0, 32),
        ) {
            let ys: Vec<f32> = xs.iter().zip(&noise).map(|(x, n)| x + n).collect();
            let (a, b) = (t(&xs), t(&ys));
            for m in [DiscrepancyMetric::default(), DiscrepancyMetric::new(MetricKind::MaxRelAbs, 1e-3).unwrap()] {
                let d1 = discrepancy(&a, &b, &m).unwrap();
                let d2 = discrepancy(&b, &a, &m).unwrap();
                prop_assert_eq!(d1, d2);
                prop_assert!(d1 >= 0.0);
                prop_assert_eq!(discrepancy(&a, &a, &m).unwrap(), 0.0);
                prop_assert_eq!(d1 == 0.0, xs == ys);
            }
        }

        #[test]
        fn correctness_monotone_in_epsilon(delta in 0f32..1.0, eps in 0f64..1.0, extra in 0f64..1.0) {
            let s = suite_with(&[("a", &[0.0, 1.0])], eps);
            let got = actual(&[("a", &[delta, 1.0])]);
            if correctness_pass(&s, &got).passed {
                let looser = s.with_epsilon(eps + extra).unwrap();
                prop_assert!(correctness_pass(&looser, &got).passed);
            }
        }
    }
}
