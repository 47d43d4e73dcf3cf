//! Test cases and suites: inputs paired with oracle-computed expected outputs.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::metrics::DiscrepancyMetric;
use crate::tensor::Tensor;

/// A kernel argument: a tensor or an f32 scalar.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Tensor(Tensor),
    Scalar(f32),
}

impl Value {
    pub fn as_tensor(&self) -> Option<&Tensor> {
        match self {
            Value::Tensor(t) => Some(t),
            Value::Scalar(_) => None,
        }
    }

    pub fn as_scalar(&self) -> Option<f32> {
        match self {
            Value::Scalar(s) => Some(*s),
            Value::Tensor(_) => None,
        }
    }
}

pub type Inputs = BTreeMap<String, Value>;
pub type Outputs = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, PartialEq)]
pub struct TestCase {
    pub case_id: String,
    pub inputs: Inputs,
    pub expected: Outputs,
    pub shape_label: String,
    pub extents: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("test suite has no cases")]
    Empty,
    #[error("duplicate case id `{0}`")]
    DuplicateCase(String),
    #[error("tolerance must be finite and non-negative, got {0}")]
    BadEpsilon(f64),
}

#[derive(Debug, Clone)]
pub struct TestSuite {
    cases: Vec<TestCase>,
    pub epsilon: f64,
    pub metric: DiscrepancyMetric,
}

impl TestSuite {
    pub fn new(cases: Vec<TestCase>, epsilon: f64, metric: DiscrepancyMetric) -> Result<Self, SuiteError> {
        if cases.is_empty() {
            return Err(SuiteError::Empty);
        }
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(SuiteError::BadEpsilon(epsilon));
        }
        let mut ids = BTreeSet::new();
        for c in &cases {
            if !ids.insert(c.case_id.as_str()) {
                return Err(SuiteError::DuplicateCase(c.case_id.clone()));
            }
        }
        Ok(Self { cases, epsilon, metric })
    }

    pub fn cases(&self) -> &[TestCase] {
        &self.cases
    }

    pub fn case(&self, id: &str) -> Option<&TestCase> {
        self.cases.iter().find(|c| c.case_id == id)
    }

    /// Distinct shape labels in first-appearance order.
    pub fn shape_labels(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.cases
            .iter()
            .map(|c| c.shape_label.as_str())
            .filter(|l| seen.insert(*l))
            .collect()
    }

    pub fn cases_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a TestCase> + 'a {
        self.cases.iter().filter(move |c| c.shape_label == label)
    }

    /// Same cases under a different tolerance.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self, SuiteError> {
        Self::new(self.cases.clone(), epsilon, self.metric)
    }
}
