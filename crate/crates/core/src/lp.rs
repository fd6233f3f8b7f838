//! Thin adapter over `minilp` for dense `max cᵀx s.t. Ax ≤ b` problems.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum LpOutcome {
    Optimal { x: DVector<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

impl LpOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            LpOutcome::Optimal { value, .. } => Some(*value),
            _ => None,
        }
    }
}

/// Maximize `cᵀx` subject to `Ax ≤ b`, all variables free.
pub fn maximize(c: &DVector<f64>, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<LpOutcome> {
    maximize_bounded(c, a, b, None)
}

/// As [`maximize`], with optional per-variable bounds.
pub fn maximize_bounded(
    c: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    bounds: Option<&[(f64, f64)]>,
) -> Result<LpOutcome> {
    let n = c.len();
    if a.ncols() != n || a.nrows() != b.len() {
        return Err(Error::Dimension(format!(
            "lp: c has {n} entries, A is {}x{}, b has {}",
            a.nrows(),
            a.ncols(),
            b.len()
        )));
    }
    let mut problem = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = (0..n)
        .map(|j| {
            let range = bounds.map(|bs| bs[j]).unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
            problem.add_var(c[j], range)
        })
        .collect();
    let mut terms = Vec::with_capacity(n);
    for i in 0..a.nrows() {
        terms.clear();
        let norm = a.row(i).norm();
        if norm == 0.0 {
            if b[i] < 0.0 {
                return Ok(LpOutcome::Infeasible);
            }
            continue;
        }
        // unit rows keep the simplex tolerances meaningful across scales
        for j in 0..n {
            let v = a[(i, j)] / norm;
            if v != 0.0 {
                terms.push((vars[j], v));
            }
        }
        problem.add_constraint(&terms[..], ComparisonOp::Le, b[i] / norm);
    }
    match problem.solve() {
        Ok(sol) => {
            let x = DVector::from_iterator(n, vars.iter().map(|v| sol[*v]));
            let value = c.dot(&x);
            // minilp reports free rays as infinite optima
            if !value.is_finite() || x.iter().any(|v| !v.is_finite()) {
                return Ok(LpOutcome::Unbounded);
            }
            Ok(LpOutcome::Optimal { value, x })
        }
        Err(minilp::Error::Infeasible) => Ok(LpOutcome::Infeasible),
        Err(minilp::Error::Unbounded) => Ok(LpOutcome::Unbounded),
    }
}
