//! CPU reference implementations of the three serving kernels, deterministic
//! input generation, and oracle-labelled test suite construction.
//!
//! All arithmetic runs in f32. f16 inputs are widened exactly and outputs
//! are rounded to nearest-even into the output dtype.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::digest::derive_seed;
use crate::metrics::DiscrepancyMetric;
use crate::suite::{Inputs, Outputs, SuiteError, TestCase, TestSuite, Value};
use crate::task::{resolve_output_shapes, KernelTask, ParamRole, ShapeFamily, SignatureError, ValueDist};
use crate::tensor::{DType, Tensor, TensorError};

pub const MERGE_ATTN_STATES_LSE: &str = "merge_attn_states_lse";
pub const FUSED_ADD_RMSNORM: &str = "fused_add_rmsnorm";
pub const SILU_AND_MUL: &str = "silu_and_mul";

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("signature error: {0}")]
    Signature(String),
    #[error("unknown oracle `{0}`")]
    Unknown(String),
    #[error("oracle `{0}` is already registered")]
    Duplicate(String),
    #[error("unknown shape label `{label}` for task `{task}`")]
    UnknownShape { task: String, label: String },
    #[error(transparent)]
    Shape(#[from] SignatureError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Suite(#[from] SuiteError),
}

fn sig_err(msg: impl Into<String>) -> OracleError {
    OracleError::Signature(msg.into())
}

fn tensor_arg<'a>(inputs: &'a Inputs, name: &str) -> Result<&'a Tensor, OracleError> {
    inputs
        .get(name)
        .and_then(Value::as_tensor)
        .ok_or_else(|| sig_err(format!("missing tensor input `{name}`")))
}

fn scalar_arg(inputs: &Inputs, name: &str) -> Result<f32, OracleError> {
    inputs
        .get(name)
        .and_then(Value::as_scalar)
        .ok_or_else(|| sig_err(format!("missing scalar input `{name}`")))
}

/// Merges two partial attention states by log-sum-exp weighting.
///
/// `v_*` are `[seq, heads, dim]`, `s_*` are `[seq, heads]`. Per (seq, head)
/// pair the larger score is subtracted before exponentiation, so scores
/// anywhere in the f32 range are safe.
pub fn merge_attn_states_lse_ref(
    v_a: &Tensor,
    s_a: &Tensor,
    v_b: &Tensor,
    s_b: &Tensor,
) -> Result<(Tensor, Tensor), OracleError> {
    if v_a.shape().len() != 3 {
        return Err(sig_err(format!("v_a must be rank 3, got {:?}", v_a.shape())));
    }
    if v_a.shape() != v_b.shape() || s_a.shape() != s_b.shape() {
        return Err(sig_err("a/b operands must have matching shapes"));
    }
    if s_a.shape() != &v_a.shape()[..2] {
        return Err(sig_err(format!(
            "score shape {:?} does not match value shape {:?}",
            s_a.shape(),
            v_a.shape()
        )));
    }
    let dim = v_a.shape()[2];
    let (va, vb) = (v_a.to_f32_vec(), v_b.to_f32_vec());
    let (sa, sb) = (s_a.to_f32_vec(), s_b.to_f32_vec());
    let mut v_out = vec![0.0f32; va.len()];
    let mut s_out = vec![0.0f32; sa.len()];
    for (i, (&a, &b)) in sa.iter().zip(&sb).enumerate() {
        let smax = a.max(b);
        let wa = (a - smax).exp();
        let wb = (b - smax).exp();
        let sum = wa + wb;
        let (ca, cb) = (wa / sum, wb / sum);
        let row = i * dim..(i + 1) * dim;
        for ((o, &x), &y) in v_out[row.clone()].iter_mut().zip(&va[row.clone()]).zip(&vb[row]) {
            *o = ca * x + cb * y;
        }
        s_out[i] = smax + sum.ln();
    }
    Ok((
        Tensor::from_f32_as(v_a.dtype(), v_a.shape().to_vec(), v_out)?,
        Tensor::from_f32_as(s_a.dtype(), s_a.shape().to_vec(), s_out)?,
    ))
}

/// `y = (x + r) / sqrt(mean((x + r)^2) + eps) * w`, row-wise over the last axis.
pub fn fused_add_rmsnorm_ref(x: &Tensor, residual: &Tensor, weight: &Tensor, eps: f32) -> Result<Tensor, OracleError> {
    if x.shape() != residual.shape() {
        return Err(sig_err(format!(
            "x {:?} and residual {:?} differ",
            x.shape(),
            residual.shape()
        )));
    }
    let width = *x.shape().last().unwrap_or(&0);
    if weight.shape() != [width] {
        return Err(sig_err(format!("weight must be [{width}], got {:?}", weight.shape())));
    }
    if eps.is_nan() || eps < 0.0 {
        return Err(sig_err(format!("eps must be non-negative, got {eps}")));
    }
    let (xs, rs, ws) = (x.to_f32_vec(), residual.to_f32_vec(), weight.to_f32_vec());
    let mut y = vec![0.0f32; xs.len()];
    for ((yrow, xrow), rrow) in y.chunks_mut(width).zip(xs.chunks(width)).zip(rs.chunks(width)) {
        let mut sum_sq = 0.0f32;
        for (h, (&a, &b)) in yrow.iter_mut().zip(xrow.iter().zip(rrow)) {
            *h = a + b;
            sum_sq += *h * *h;
        }
        let inv_rms = 1.0 / (sum_sq / width as f32 + eps).sqrt();
        for (h, &w) in yrow.iter_mut().zip(&ws) {
            *h = *h * inv_rms * w;
        }
    }
    Ok(Tensor::from_f32_as(x.dtype(), x.shape().to_vec(), y)?)
}

/// `out = silu(x) * g` with `silu(z) = z / (1 + e^-z)`.
pub fn silu_and_mul_ref(x: &Tensor, g: &Tensor) -> Result<Tensor, OracleError> {
    if x.shape() != g.shape() {
        return Err(sig_err(format!("x {:?} and g {:?} differ", x.shape(), g.shape())));
    }
    let out = x
        .to_f32_vec()
        .into_iter()
        .zip(g.to_f32_vec())
        .map(|(z, gate)| z / (1.0 + (-z).exp()) * gate)
        .collect();
    Ok(Tensor::from_f32_as(x.dtype(), x.shape().to_vec(), out)?)
}

/// One parameter of an oracle's fixed signature.
#[derive(Debug, Clone)]
pub struct OracleParam {
    pub name: &'static str,
    pub role: ParamRole,
    /// Tensor rank; 0 for scalars.
    pub rank: usize,
    /// For outputs: the input whose dtype the output inherits.
    pub dtype_from: Option<&'static str>,
}

const fn inp(name: &'static str, rank: usize) -> OracleParam {
    OracleParam {
        name,
        role: ParamRole::Input,
        rank,
        dtype_from: None,
    }
}

const fn outp(name: &'static str, rank: usize, from: &'static str) -> OracleParam {
    OracleParam {
        name,
        role: ParamRole::Output,
        rank,
        dtype_from: Some(from),
    }
}

const fn scal(name: &'static str) -> OracleParam {
    OracleParam {
        name,
        role: ParamRole::Scalar,
        rank: 0,
        dtype_from: None,
    }
}

pub type OracleFn = fn(&Inputs) -> Result<Outputs, OracleError>;

#[derive(Debug, Clone)]
pub struct Oracle {
    pub params: Vec<OracleParam>,
    pub eval: OracleFn,
}

fn eval_merge(inputs: &Inputs) -> Result<Outputs, OracleError> {
    let (v, s) = merge_attn_states_lse_ref(
        tensor_arg(inputs, "v_a")?,
        tensor_arg(inputs, "s_a")?,
        tensor_arg(inputs, "v_b")?,
        tensor_arg(inputs, "s_b")?,
    )?;
    Ok([("v_out".to_string(), v), ("s_out".to_string(), s)]
        .into_iter()
        .collect())
}

fn eval_rmsnorm(inputs: &Inputs) -> Result<Outputs, OracleError> {
    let y = fused_add_rmsnorm_ref(
        tensor_arg(inputs, "x")?,
        tensor_arg(inputs, "residual")?,
        tensor_arg(inputs, "weight")?,
        scalar_arg(inputs, "eps")?,
    )?;
    Ok([("y".to_string(), y)].into_iter().collect())
}

fn eval_silu(inputs: &Inputs) -> Result<Outputs, OracleError> {
    let out = silu_and_mul_ref(tensor_arg(inputs, "x")?, tensor_arg(inputs, "g")?)?;
    Ok([("out".to_string(), out)].into_iter().collect())
}

#[derive(Debug, Clone, Default)]
pub struct OracleRegistry {
    entries: BTreeMap<String, Oracle>,
}

impl OracleRegistry {
    /// Registry holding the three built-in kernels.
    pub fn builtin() -> Self {
        let mut r = Self::default();
        r.register(
            MERGE_ATTN_STATES_LSE,
            Oracle {
                params: vec![
                    inp("v_a", 3),
                    inp("s_a", 2),
                    inp("v_b", 3),
                    inp("s_b", 2),
                    outp("v_out", 3, "v_a"),
                    outp("s_out", 2, "s_a"),
                ],
                eval: eval_merge,
            },
        )
        .expect("fresh registry");
        r.register(
            FUSED_ADD_RMSNORM,
            Oracle {
                params: vec![
                    inp("x", 2),
                    inp("residual", 2),
                    inp("weight", 1),
                    scal("eps"),
                    outp("y", 2, "x"),
                ],
                eval: eval_rmsnorm,
            },
        )
        .expect("fresh registry");
        r.register(
            SILU_AND_MUL,
            Oracle {
                params: vec![inp("x", 2), inp("g", 2), outp("out", 2, "x")],
                eval: eval_silu,
            },
        )
        .expect("fresh registry");
        r
    }

    pub fn register(&mut self, id: &str, oracle: Oracle) -> Result<(), OracleError> {
        if self.entries.contains_key(id) {
            return Err(OracleError::Duplicate(id.into()));
        }
        self.entries.insert(id.into(), oracle);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Oracle, OracleError> {
        self.entries.get(id).ok_or_else(|| OracleError::Unknown(id.into()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Checks that `task`'s signature matches its bound oracle: same
    /// parameter names, roles and ranks, and output dtypes inherited from
    /// the designated inputs.
    pub fn check_task(&self, task: &KernelTask) -> Result<(), OracleError> {
        let oracle = self.get(&task.oracle_id)?;
        if task.signature.len() != oracle.params.len() {
            return Err(sig_err(format!(
                "task `{}` declares {} parameters, oracle `{}` expects {}",
                task.name,
                task.signature.len(),
                task.oracle_id,
                oracle.params.len()
            )));
        }
        for op in &oracle.params {
            let p = task
                .param(op.name)
                .ok_or_else(|| sig_err(format!("task `{}` lacks parameter `{}`", task.name, op.name)))?;
            if p.role != op.role {
                return Err(sig_err(format!(
                    "parameter `{}` has role {:?}, oracle expects {:?}",
                    p.name, p.role, op.role
                )));
            }
            if p.shape.len() != op.rank {
                return Err(sig_err(format!(
                    "parameter `{}` has rank {}, oracle expects {}",
                    p.name,
                    p.shape.len(),
                    op.rank
                )));
            }
            if let Some(src) = op.dtype_from {
                let src_dtype = task.param(src).map(|s| s.dtype);
                if src_dtype != Some(p.dtype) {
                    return Err(sig_err(format!("output `{}` must have the dtype of `{src}`", p.name)));
                }
            }
        }
        Ok(())
    }

    /// Evaluates the task's oracle and checks its outputs against the
    /// signature's resolved output shapes.
    pub fn evaluate(&self, task: &KernelTask, inputs: &Inputs) -> Result<Outputs, OracleError> {
        let oracle = self.get(&task.oracle_id)?;
        let in_shapes = inputs
            .iter()
            .filter_map(|(k, v)| v.as_tensor().map(|t| (k.clone(), t.shape().to_vec())))
            .collect();
        let expected_shapes = resolve_output_shapes(task, &in_shapes)?;
        let outputs = (oracle.eval)(inputs)?;
        for (name, shape) in &expected_shapes {
            let got = outputs
                .get(name)
                .ok_or_else(|| sig_err(format!("oracle produced no `{name}`")))?;
            if got.shape() != shape.as_slice() {
                return Err(sig_err(format!(
                    "oracle output `{name}` has shape {:?}, signature resolves {:?}",
                    got.shape(),
                    shape
                )));
            }
        }
        Ok(outputs)
    }
}

/// Value distributions for generated inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputGenSpec {
    pub value_range: (f32, f32),
    pub score_mean: f32,
    pub score_std: f32,
    pub weight_range: (f32, f32),
}

impl Default for InputGenSpec {
    fn default() -> Self {
        Self {
            value_range: (-1.0, 1.0),
            score_mean: 0.0,
            score_std: 1.0,
            weight_range: (0.5, 1.5),
        }
    }
}

fn fill(dist: ValueDist, n: usize, rng: &mut ChaCha8Rng, spec: &InputGenSpec) -> Vec<f32> {
    match dist {
        ValueDist::Value => {
            let u = Uniform::new_inclusive(spec.value_range.0, spec.value_range.1).expect("valid range");
            (0..n).map(|_| u.sample(rng)).collect()
        }
        ValueDist::Weight => {
            let u = Uniform::new_inclusive(spec.weight_range.0, spec.weight_range.1).expect("valid range");
            (0..n).map(|_| u.sample(rng)).collect()
        }
        ValueDist::Score => {
            let d = Normal::new(spec.score_mean, spec.score_std).expect("valid normal");
            (0..n).map(|_| d.sample(rng)).collect()
        }
    }
}

/// Deterministically generates every input of `task` for one shape tuple.
///
/// Each tensor parameter draws from its own stream seeded by
/// `(seed, shape, parameter name)`; f16 parameters are sampled in f32 and
/// rounded. Scalars take their fixed signature value.
pub fn generate_inputs_for(
    task: &KernelTask,
    family: &ShapeFamily,
    seed: u64,
    spec: &InputGenSpec,
) -> Result<Inputs, OracleError> {
    let shapes = task.input_shapes(&family.extents)?;
    let shape_key: Vec<u8> = family.extents.iter().flat_map(|e| (*e as u64).to_le_bytes()).collect();
    let mut inputs = Inputs::new();
    for p in &task.signature {
        match p.role {
            ParamRole::Output => {}
            ParamRole::Scalar => {
                let v = p
                    .value
                    .ok_or_else(|| sig_err(format!("scalar `{}` has no value", p.name)))?;
                inputs.insert(p.name.clone(), Value::Scalar(v));
            }
            ParamRole::Input => {
                let shape = shapes[&p.name].clone();
                let n = shape.iter().product();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[&shape_key, p.name.as_bytes()]));
                // Burn one draw so streams for different dtypes never alias.
                let _: u32 = rng.random();
                let data = fill(p.dist, n, &mut rng, spec);
                inputs.insert(
                    p.name.clone(),
                    Value::Tensor(Tensor::from_f32_as(p.dtype, shape, data)?),
                );
            }
        }
    }
    Ok(inputs)
}

/// [`generate_inputs_for`] keyed by one of the task's shape-family labels.
pub fn generate_inputs(
    task: &KernelTask,
    shape_label: &str,
    seed: u64,
    spec: &InputGenSpec,
) -> Result<Inputs, OracleError> {
    let family = task.family(shape_label).ok_or_else(|| OracleError::UnknownShape {
        task: task.name.clone(),
        label: shape_label.into(),
    })?;
    generate_inputs_for(task, family, seed, spec)
}

/// Case identifier for a (shape, seed) pair.
pub fn case_id(label: &str, seed: u64) -> String {
    format!("{label}#{seed}")
}

/// Builds one oracle-labelled case per (family, seed). Cases are evaluated
/// on scoped threads; the result does not depend on scheduling.
pub fn build_suite_over(
    task: &KernelTask,
    families: &[ShapeFamily],
    seeds: &[u64],
    epsilon: f64,
    metric: DiscrepancyMetric,
    registry: &OracleRegistry,
    spec: &InputGenSpec,
) -> Result<TestSuite, OracleError> {
    registry.check_task(task)?;
    let jobs: Vec<(&ShapeFamily, u64)> = families
        .iter()
        .flat_map(|f| seeds.iter().map(move |&s| (f, s)))
        .collect();
    let results: Vec<Result<TestCase, OracleError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|&(family, seed)| {
                scope.spawn(move || {
                    let inputs = generate_inputs_for(task, family, seed, spec)?;
                    let expected = registry.evaluate(task, &inputs)?;
                    Ok(TestCase {
                        case_id: case_id(&family.label, seed),
                        inputs,
                        expected,
                        shape_label: family.label.clone(),
                        extents: family.extents.clone(),
                        seed,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("oracle evaluation panicked"))
            .collect()
    });
    let cases = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(TestSuite::new(cases, epsilon, metric)?)
}

/// [`build_suite_over`] using the task's own shape families.
pub fn build_suite(
    task: &KernelTask,
    seeds: &[u64],
    epsilon: f64,
    metric: DiscrepancyMetric,
    registry: &OracleRegistry,
    spec: &InputGenSpec,
) -> Result<TestSuite, OracleError> {
    build_suite_over(task, &task.shape_families, seeds, epsilon, metric, registry, spec)
}

/// Tolerance default for a task: the loosest default over its output dtypes.
pub fn default_task_epsilon(task: &KernelTask) -> f64 {
    task.params(ParamRole::Output)
        .map(|p| crate::metrics::default_epsilon(p.dtype))
        .fold(0.0, f64::max)
}

/// Built-in task definitions for the three kernels, with an empty baseline
/// source. Used by tests and as templates for manifests.
pub fn builtin_task(oracle_id: &str, dtype: DType) -> Option<KernelTask> {
    use crate::task::{default_shape_families, Param};
    let (signature, dims): (Vec<Param>, &[&str]) = match oracle_id {
        MERGE_ATTN_STATES_LSE => (
            vec![
                Param::input("v_a", dtype, &["seq", "heads", "dim"], ValueDist::Value),
                Param::input("s_a", DType::F32, &["seq", "heads"], ValueDist::Score),
                Param::input("v_b", dtype, &["seq", "heads", "dim"], ValueDist::Value),
                Param::input("s_b", DType::F32, &["seq", "heads"], ValueDist::Score),
                Param::output("v_out", dtype, &["seq", "heads", "dim"]),
                Param::output("s_out", DType::F32, &["seq", "heads"]),
            ],
            &["seq", "heads", "dim"],
        ),
        FUSED_ADD_RMSNORM => (
            vec![
                Param::input("x", dtype, &["rows", "hidden"], ValueDist::Value),
                Param::input("residual", dtype, &["rows", "hidden"], ValueDist::Value),
                Param::input("weight", dtype, &["hidden"], ValueDist::Weight),
                Param::scalar("eps", 1e-6),
                Param::output("y", dtype, &["rows", "hidden"]),
            ],
            &["rows", "hidden"],
        ),
        SILU_AND_MUL => (
            vec![
                Param::input("x", dtype, &["rows", "hidden"], ValueDist::Value),
                Param::input("g", dtype, &["rows", "hidden"], ValueDist::Value),
                Param::output("out", dtype, &["rows", "hidden"]),
            ],
            &["rows", "hidden"],
        ),
        _ => return None,
    };
    Some(KernelTask {
        name: oracle_id.into(),
        baseline_source: String::new(),
        entry: "kf_launch".into(),
        signature,
        oracle_id: oracle_id.into(),
        shape_dims: dims.iter().map(|s| s.to_string()).collect(),
        shape_families: default_shape_families(oracle_id),
    })
}
