//! Minimal reverse-mode differentiation over dense matrices, plus the Adam
//! optimiser, a central-difference gradient checker and the checkpoint format.

mod adam;
pub mod checkpoint;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use tape::{elu_plus_one, elu_plus_one_grad, row_softmax, CustomOp, Tape, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Named, ordered set of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor and returns its slot.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, slot: usize) -> &Matrix {
        &self.values[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Puts every tensor on `tape` as a trainable leaf, in slot order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.param(v.clone())).collect()
    }

    /// Gradients for `vars` after a backward pass; unreachable slots get zeros.
    pub fn grads(&self, tape: &Tape, vars: &[Var]) -> Vec<Matrix> {
        vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, flat entry index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Compares analytic gradients against central differences
/// `(f(θ+h) − f(θ−h)) / 2h`, coordinate by coordinate.
///
/// `f` builds a scalar loss on a fresh tape from the given parameter vars and
/// must be deterministic. The relative error of a coordinate is
/// `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check<F>(params: &[Matrix], h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::invalid(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Matrix> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut eval = |ps: &[Matrix]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let l = f(&mut t, &vs)?;
        Ok(t.value(l)[(0, 0)])
    };

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coordinates: 0,
    };
    for p in 0..work.len() {
        for e in 0..work[p].len() {
            let orig = work[p].as_slice()[e];
            work[p].as_mut_slice()[e] = orig + h;
            let plus = eval(&work)?;
            work[p].as_mut_slice()[e] = orig - h;
            let minus = eval(&work)?;
            work[p].as_mut_slice()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[p].as_slice()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (p, e);
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
