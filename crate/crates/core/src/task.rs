//! Kernel task definitions: signature, oracle binding and shape families.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::DType;

/// Concrete shape per parameter name.
pub type ShapeMap = BTreeMap<String, Vec<usize>>;

#[derive(Debug, Error)]
pub enum SignatureError {
    #[error("missing shape for input parameter `{0}`")]
    MissingInput(String),
    #[error("parameter `{param}` expects rank {expected}, got shape {got:?}")]
    Rank {
        param: String,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("dimension `{dim}` bound to {first} but parameter `{param}` has {second}")]
    Conflict {
        dim: String,
        first: usize,
        param: String,
        second: usize,
    },
    #[error("parameter `{param}` axis {axis} must be {expected}, got {got}")]
    Fixed {
        param: String,
        axis: usize,
        expected: usize,
        got: usize,
    },
    #[error("output `{param}` uses dimension `{dim}` which no input binds")]
    Unresolvable { param: String, dim: String },
    #[error("shape family {label} has {got} extents but the task names {expected} dimensions")]
    FamilyArity { label: String, expected: usize, got: usize },
    #[error("invalid signature: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed task manifest {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error(transparent)]
    Signature(#[from] SignatureError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamRole {
    Input,
    Output,
    Scalar,
}

/// Value distribution used when generating inputs for a tensor parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueDist {
    /// uniform(-1, 1)
    #[default]
    Value,
    /// normal(0, 1); attention scores and logits
    Score,
    /// uniform(0.5, 1.5); normalization weights
    Weight,
}

/// One axis of a symbolic shape: a named dimension or a literal extent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dim {
    Fixed(usize),
    Sym(String),
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Fixed(n) => write!(f, "{n}"),
            Dim::Sym(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub role: ParamRole,
    #[serde(default = "default_dtype")]
    pub dtype: DType,
    #[serde(default)]
    pub shape: Vec<Dim>,
    #[serde(default)]
    pub dist: ValueDist,
    /// Fixed value for scalar parameters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f32>,
}

fn default_dtype() -> DType {
    DType::F32
}

impl Param {
    pub fn input(name: &str, dtype: DType, shape: &[&str], dist: ValueDist) -> Self {
        Self {
            name: name.into(),
            role: ParamRole::Input,
            dtype,
            shape: shape.iter().map(|s| Dim::Sym((*s).into())).collect(),
            dist,
            value: None,
        }
    }

    pub fn output(name: &str, dtype: DType, shape: &[&str]) -> Self {
        Self {
            name: name.into(),
            role: ParamRole::Output,
            dtype,
            shape: shape.iter().map(|s| Dim::Sym((*s).into())).collect(),
            dist: ValueDist::Value,
            value: None,
        }
    }

    pub fn scalar(name: &str, value: f32) -> Self {
        Self {
            name: name.into(),
            role: ParamRole::Scalar,
            dtype: DType::F32,
            shape: Vec::new(),
            dist: ValueDist::Value,
            value: Some(value),
        }
    }
}

/// A concrete shape tuple over the task's named dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapeFamily {
    pub label: String,
    pub extents: Vec<usize>,
}

impl ShapeFamily {
    pub fn new(extents: Vec<usize>) -> Self {
        Self {
            label: shape_label(&extents),
            extents,
        }
    }
}

/// Canonical label for a shape tuple, e.g. `[512, 32, 256]`.
pub fn shape_label(extents: &[usize]) -> String {
    let parts: Vec<String> = extents.iter().map(|d| d.to_string()).collect();
    format!("[{}]", parts.join(", "))
}

/// Default shape families for the three reference kernels, taken from the
/// shapes used by production LLM serving (LLaMA-7B/13B/70B class models).
pub fn default_shape_families(oracle_id: &str) -> Vec<ShapeFamily> {
    let shapes: &[&[usize]] = match oracle_id {
        "merge_attn_states_lse" => &[&[512, 32, 256], &[512, 40, 128], &[768, 32, 256], &[512, 64, 128]],
        "fused_add_rmsnorm" => &[&[256, 4096], &[1024, 4096], &[128, 11008], &[512, 14336]],
        "silu_and_mul" => &[&[16, 4096], &[32, 5120], &[64, 8192], &[16, 12288]],
        _ => &[],
    };
    shapes.iter().map(|s| ShapeFamily::new(s.to_vec())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTask {
    pub name: String,
    /// Opaque GPU kernel source of the baseline.
    pub baseline_source: String,
    /// Host-side launcher symbol the harness binds to.
    pub entry: String,
    pub signature: Vec<Param>,
    pub oracle_id: String,
    /// Names of the axes a shape tuple ranges over, in tuple order.
    pub shape_dims: Vec<String>,
    pub shape_families: Vec<ShapeFamily>,
}

impl KernelTask {
    pub fn params(&self, role: ParamRole) -> impl Iterator<Item = &Param> {
        self.signature.iter().filter(move |p| p.role == role)
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.signature.iter().find(|p| p.name == name)
    }

    pub fn family(&self, label: &str) -> Option<&ShapeFamily> {
        self.shape_families.iter().find(|f| f.label == label)
    }

    /// Structural checks that do not involve the oracle registry.
    pub fn validate(&self) -> Result<(), SignatureError> {
        let mut seen = std::collections::BTreeSet::new();
        for p in &self.signature {
            if !seen.insert(p.name.as_str()) {
                return Err(SignatureError::Invalid(format!("duplicate parameter `{}`", p.name)));
            }
            match p.role {
                ParamRole::Scalar => {
                    if p.value.is_none() {
                        return Err(SignatureError::Invalid(format!("scalar `{}` has no value", p.name)));
                    }
                    if !p.shape.is_empty() {
                        return Err(SignatureError::Invalid(format!(
                            "scalar `{}` must not declare a shape",
                            p.name
                        )));
                    }
                }
                _ if p.shape.is_empty() => {
                    return Err(SignatureError::Invalid(format!(
                        "tensor `{}` must declare a shape",
                        p.name
                    )));
                }
                _ => {}
            }
        }
        if self.params(ParamRole::Output).next().is_none() {
            return Err(SignatureError::Invalid("no output parameters".into()));
        }
        // Every output dimension must be bound by some input.
        let bound: std::collections::BTreeSet<&str> = self
            .params(ParamRole::Input)
            .flat_map(|p| p.shape.iter())
            .filter_map(|d| match d {
                Dim::Sym(s) => Some(s.as_str()),
                Dim::Fixed(_) => None,
            })
            .collect();
        for p in self.params(ParamRole::Output) {
            for d in &p.shape {
                if let Dim::Sym(s) = d {
                    if !bound.contains(s.as_str()) {
                        return Err(SignatureError::Unresolvable {
                            param: p.name.clone(),
                            dim: s.clone(),
                        });
                    }
                }
            }
        }
        for f in &self.shape_families {
            if f.extents.len() != self.shape_dims.len() {
                return Err(SignatureError::FamilyArity {
                    label: f.label.clone(),
                    expected: self.shape_dims.len(),
                    got: f.extents.len(),
                });
            }
        }
        Ok(())
    }

    /// Binds the shape tuple `extents` to `shape_dims` and returns concrete
    /// shapes for every input tensor.
    pub fn input_shapes(&self, extents: &[usize]) -> Result<ShapeMap, SignatureError> {
        if extents.len() != self.shape_dims.len() {
            return Err(SignatureError::FamilyArity {
                label: shape_label(extents),
                expected: self.shape_dims.len(),
                got: extents.len(),
            });
        }
        if extents.contains(&0) {
            return Err(SignatureError::Invalid(format!(
                "shape {} has a zero extent",
                shape_label(extents)
            )));
        }
        let binding: BTreeMap<&str, usize> = self
            .shape_dims
            .iter()
            .map(String::as_str)
            .zip(extents.iter().copied())
            .collect();
        let mut out = ShapeMap::new();
        for p in self.params(ParamRole::Input) {
            let shape = p
                .shape
                .iter()
                .map(|d| match d {
                    Dim::Fixed(n) => Ok(*n),
                    Dim::Sym(s) => binding
                        .get(s.as_str())
                        .copied()
                        .ok_or_else(|| SignatureError::Unresolvable {
                            param: p.name.clone(),
                            dim: s.clone(),
                        }),
                })
                .collect::<Result<Vec<_>, _>>()?;
            out.insert(p.name.clone(), shape);
        }
        Ok(out)
    }

    /// Element count of the largest tensor parameter for a shape tuple.
    pub fn max_tensor_elements(&self, extents: &[usize]) -> Result<usize, SignatureError> {
        let inputs = self.input_shapes(extents)?;
        let outputs = resolve_output_shapes(self, &inputs)?;
        Ok(inputs
            .values()
            .chain(outputs.values())
            .map(|s| s.iter().product::<usize>())
            .max()
            .unwrap_or(0))
    }
}

/// Resolves concrete output shapes from concrete input shapes.
pub fn resolve_output_shapes(task: &KernelTask, input_shapes: &ShapeMap) -> Result<ShapeMap, SignatureError> {
    let mut bound: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
    for p in task.params(ParamRole::Input) {
        let shape = input_shapes
            .get(&p.name)
            .ok_or_else(|| SignatureError::MissingInput(p.name.clone()))?;
        if shape.len() != p.shape.len() {
            return Err(SignatureError::Rank {
                param: p.name.clone(),
                expected: p.shape.len(),
                got: shape.clone(),
            });
        }
        for (axis, (dim, &extent)) in p.shape.iter().zip(shape).enumerate() {
            match dim {
                Dim::Fixed(n) if *n != extent => {
                    return Err(SignatureError::Fixed {
                        param: p.name.clone(),
                        axis,
                        expected: *n,
                        got: extent,
                    })
                }
                Dim::Fixed(_) => {}
                Dim::Sym(s) => match bound.get(s.as_str()) {
                    Some(&(first, _)) if first != extent => {
                        return Err(SignatureError::Conflict {
                            dim: s.clone(),
                            first,
                            param: p.name.clone(),
                            second: extent,
                        })
                    }
                    Some(_) => {}
                    None => {
                        bound.insert(s, (extent, &p.name));
                    }
                },
            }
        }
    }
    let mut out = ShapeMap::new();
    for p in task.params(ParamRole::Output) {
        let shape = p
            .shape
            .iter()
            .map(|d| match d {
                Dim::Fixed(n) => Ok(*n),
                Dim::Sym(s) => bound
                    .get(s.as_str())
                    .map(|&(n, _)| n)
                    .ok_or_else(|| SignatureError::Unresolvable {
                        param: p.name.clone(),
                        dim: s.clone(),
                    }),
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.insert(p.name.clone(), shape);
    }
    Ok(out)
}

/// On-disk task manifest (TOML).
///
/// ```toml
/// name = "silu_and_mul"
/// oracle = "silu_and_mul"
/// source = "../kernels/silu_and_mul/baseline.cu"
/// entry = "kf_launch"
/// shape_dims = ["rows", "hidden"]
///
/// [[param]]
/// name = "x"
/// role = "input"
/// dtype = "f16"
/// shape = ["rows", "hidden"]
///
/// [[shape_family]]
/// extents = [16, 4096]
/// ```
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TaskManifest {
    pub name: String,
    pub oracle: String,
    /// Baseline source path, relative to the manifest's directory.
    pub source: PathBuf,
    #[serde(default = "default_entry")]
    pub entry: String,
    pub shape_dims: Vec<String>,
    #[serde(rename = "param")]
    pub params: Vec<Param>,
    /// Defaults to the built-in families for `oracle` when omitted.
    #[serde(default, rename = "shape_family")]
    pub shape_families: Vec<ManifestFamily>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFamily {
    pub extents: Vec<usize>,
    #[serde(default)]
    pub label: Option<String>,
}

fn default_entry() -> String {
    "kf_launch".into()
}

impl TaskManifest {
    pub fn into_task(self, baseline_source: String) -> Result<KernelTask, SignatureError> {
        let shape_families = if self.shape_families.is_empty() {
            default_shape_families(&self.oracle)
        } else {
            self.shape_families
                .into_iter()
                .map(|f| ShapeFamily {
                    label: f.label.unwrap_or_else(|| shape_label(&f.extents)),
                    extents: f.extents,
                })
                .collect()
        };
        let task = KernelTask {
            name: self.name,
            baseline_source,
            entry: self.entry,
            signature: self.params,
            oracle_id: self.oracle,
            shape_dims: self.shape_dims,
            shape_families,
        };
        task.validate()?;
        Ok(task)
    }
}

/// Loads a task manifest and the baseline source it points to.
pub fn load_task(path: &Path) -> Result<KernelTask, ManifestError> {
    let text = fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let manifest: TaskManifest = toml::from_str(&text).map_err(|source| ManifestError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let src_path = base.join(&manifest.source);
    let source = fs::read_to_string(&src_path).map_err(|source| ManifestError::Io {
        path: src_path.clone(),
        source,
    })?;
    Ok(manifest.into_task(source)?)
}
