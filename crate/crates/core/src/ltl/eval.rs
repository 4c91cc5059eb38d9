use std::collections::BTreeMap;

use thiserror::Error;

use super::Formula;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("trace must contain at least one step")]
    Empty,
    #[error("column '{name}' has {got} steps, expected {expected}")]
    RaggedColumn { name: String, got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("predicate '{predicate}' is not assigned at step {step}")]
    Unassigned { predicate: String, step: usize },
    #[error("step index {index} out of range for trace of length {len}")]
    IndexOutOfRange { index: usize, len: usize },
}

/// A finite, non-empty sequence of truth assignments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    steps: Vec<BTreeMap<String, bool>>,
}

impl Trace {
    pub fn new(steps: Vec<BTreeMap<String, bool>>) -> Result<Self, TraceError> {
        if steps.is_empty() {
            return Err(TraceError::Empty);
        }
        Ok(Trace { steps })
    }

    /// Builds a trace from per-predicate columns of equal length.
    pub fn from_columns<S: AsRef<str>>(columns: &[(S, Vec<bool>)]) -> Result<Self, TraceError> {
        let len = columns.first().map(|(_, c)| c.len()).unwrap_or(0);
        if len == 0 {
            return Err(TraceError::Empty);
        }
        let mut steps = vec![BTreeMap::new(); len];
        for (name, values) in columns {
            if values.len() != len {
                return Err(TraceError::RaggedColumn {
                    name: name.as_ref().to_string(),
                    got: values.len(),
                    expected: len,
                });
            }
            for (step, v) in steps.iter_mut().zip(values) {
                step.insert(name.as_ref().to_string(), *v);
            }
        }
        Ok(Trace { steps })
    }

    /// A one-step trace from a single assignment.
    pub fn single(assignment: BTreeMap<String, bool>) -> Self {
        Trace {
            steps: vec![assignment],
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[BTreeMap<String, bool>] {
        &self.steps
    }

    pub fn value(&self, step: usize, predicate: &str) -> Option<bool> {
        self.steps.get(step).and_then(|s| s.get(predicate).copied())
    }

    /// Overwrites one value, inserting it if absent.
    pub fn set(&mut self, step: usize, predicate: &str, value: bool) {
        if let Some(s) = self.steps.get_mut(step) {
            s.insert(predicate.to_string(), value);
        }
    }
}

/// Truth value of `f` at every step of `trace`.
///
/// Each subformula is evaluated once over the whole trace, sweeping backwards
/// for the temporal operators.
pub fn evaluate_all(f: &Formula, trace: &Trace) -> Result<Vec<bool>, EvalError> {
    let n = trace.len();
    Ok(match f {
        Formula::Atom(name) => {
            let mut col = Vec::with_capacity(n);
            for (i, step) in trace.steps.iter().enumerate() {
                match step.get(name) {
                    Some(v) => col.push(*v),
                    None => {
                        return Err(EvalError::Unassigned {
                            predicate: name.clone(),
                            step: i,
                        })
                    }
                }
            }
            col
        }
        Formula::Not(g) => evaluate_all(g, trace)?.into_iter().map(|v| !v).collect(),
        Formula::And(a, b) => zip_with(a, b, trace, |x, y| x && y)?,
        Formula::Or(a, b) => zip_with(a, b, trace, |x, y| x || y)?,
        Formula::Xor(a, b) => zip_with(a, b, trace, |x, y| x ^ y)?,
        Formula::Implies(a, b) => zip_with(a, b, trace, |x, y| !x || y)?,
        Formula::Next(g) => {
            let inner = evaluate_all(g, trace)?;
            (0..n).map(|i| i + 1 < n && inner[i + 1]).collect()
        }
        Formula::Always(g) => {
            let inner = evaluate_all(g, trace)?;
            let mut out = vec![false; n];
            let mut acc = true;
            for i in (0..n).rev() {
                acc = acc && inner[i];
                out[i] = acc;
            }
            out
        }
        Formula::Eventually(g) => {
            let inner = evaluate_all(g, trace)?;
            let mut out = vec![false; n];
            let mut acc = false;
            for i in (0..n).rev() {
                acc = acc || inner[i];
                out[i] = acc;
            }
            out
        }
        Formula::Until(a, b) => {
            let lhs = evaluate_all(a, trace)?;
            let rhs = evaluate_all(b, trace)?;
            // Inclusive: lhs must also hold where rhs first holds.
            let mut out = vec![false; n];
            let mut later = false;
            for i in (0..n).rev() {
                later = lhs[i] && (rhs[i] || later);
                out[i] = later;
            }
            out
        }
    })
}

fn zip_with(a: &Formula, b: &Formula, trace: &Trace, op: impl Fn(bool, bool) -> bool) -> Result<Vec<bool>, EvalError> {
    let lhs = evaluate_all(a, trace)?;
    let rhs = evaluate_all(b, trace)?;
    Ok(lhs.into_iter().zip(rhs).map(|(x, y)| op(x, y)).collect())
}

/// Satisfaction of `f` at step `index`.
pub fn evaluate_at(f: &Formula, trace: &Trace, index: usize) -> Result<bool, EvalError> {
    if index >= trace.len() {
        return Err(EvalError::IndexOutOfRange {
            index,
            len: trace.len(),
        });
    }
    Ok(evaluate_all(f, trace)?[index])
}

/// Satisfaction of `f` by the whole trace (at step 0).
pub fn evaluate(f: &Formula, trace: &Trace) -> Result<bool, EvalError> {
    evaluate_at(f, trace, 0)
}
