//! Dense strictly convex QP `min ½xᵀHx + fᵀx  s.t.  Cx ≤ d` by the
//! Goldfarb–Idnani dual active-set method.
//!
//! The Hessian factor is computed once per solver, so repeated solves with a
//! fixed `H` only pay for the active-set iterations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: DVector<f64>,
    pub value: f64,
    /// Indices of the constraints active at `x`.
    pub active: Vec<usize>,
    /// Multipliers aligned with `active`, in the scaling of the original rows.
    pub multipliers: Vec<f64>,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct QpSolver {
    h: DMatrix<f64>,
    /// `L⁻ᵀ` where `H = LLᵀ`.
    j0: DMatrix<f64>,
    pub feas_tol: f64,
    pub max_iter: usize,
}

const DEP_TOL: f64 = 1e-12;

impl QpSolver {
    pub fn new(h: DMatrix<f64>) -> Result<Self> {
        if h.nrows() != h.ncols() || h.nrows() == 0 {
            return Err(Error::Dimension(format!("qp: Hessian is {}x{}", h.nrows(), h.ncols())));
        }
        let sym = (&h - h.transpose()).amax();
        if sym > 1e-9 * (1.0 + h.amax()) {
            return Err(Error::InvalidParameter("qp: Hessian is not symmetric".into()));
        }
        let chol = h
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("qp: Hessian is not positive definite".into()))?;
        let n = h.nrows();
        let l = chol.l();
        let l_inv = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::InvalidParameter("qp: singular Cholesky factor".into()))?;
        Ok(Self { h, j0: l_inv.transpose(), feas_tol: 1e-9, max_iter: 0 })
    }

    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn objective(&self, f: &DVector<f64>, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + f.dot(x)
    }

    /// Solve with linear term `f` and constraints `Cx ≤ d`. Constraints listed
    /// in `hint` are preferred when several are violated, which lets the
    /// previous active set steer the order of additions.
    pub fn solve(
        &self,
        f: &DVector<f64>,
        c: &DMatrix<f64>,
        d: &DVector<f64>,
        hint: &[usize],
    ) -> Result<QpSolution> {
        let n = self.dim();
        let m = c.nrows();
        if f.len() != n || c.ncols() != n || d.len() != m {
            return Err(Error::Dimension(format!(
                "qp: n={n}, f has {}, C is {}x{}, d has {}",
                f.len(),
                c.nrows(),
                c.ncols(),
                d.len()
            )));
        }
        // Work with unit rows of the form n_iᵀx ≥ b_i.
        let mut scale = vec![1.0; m];
        let mut nmat = DMatrix::zeros(n, m);
        let mut bvec = DVector::zeros(m);
        for i in 0..m {
            let norm = c.row(i).norm();
            if norm == 0.0 {
                if d[i] < -self.feas_tol {
                    return Ok(self.infeasible(f, DVector::zeros(n), 0));
                }
                scale[i] = 0.0;
                continue;
            }
            scale[i] = norm;
            for k in 0..n {
                nmat[(k, i)] = -c[(i, k)] / norm;
            }
            bvec[i] = -d[i] / norm;
        }
        let mut preferred = vec![false; m];
        for &i in hint {
            if i < m {
                preferred[i] = true;
            }
        }
        let max_iter = if self.max_iter > 0 { self.max_iter } else { 20 * (n + m) + 100 };

        let mut j = self.j0.clone();
        let mut r = DMatrix::<f64>::zeros(n, n);
        let mut active: Vec<usize> = Vec::new();
        let mut u: Vec<f64> = Vec::new();
        let mut is_active = vec![false; m];

        // unconstrained minimizer: x = -J Jᵀ f
        let mut x = -(&j * (j.transpose() * f));
        let mut iterations = 0;

        loop {
            // choose a violated constraint
            let slack = nmat.tr_mul(&x) - &bvec;
            let mut pick: Option<(usize, f64, bool)> = None;
            for i in 0..m {
                if scale[i] == 0.0 || is_active[i] {
                    continue;
                }
                let s = slack[i];
                if s < -self.feas_tol {
                    let better = match pick {
                        None => true,
                        Some((_, sv, pref)) => {
                            (preferred[i] && !pref) || (preferred[i] == pref && s < sv)
                        }
                    };
                    if better {
                        pick = Some((i, s, preferred[i]));
                    }
                }
            }
            let Some((p, _, _)) = pick else {
                let value = self.objective(f, &x);
                let multipliers = active.iter().zip(&u).map(|(&i, &ui)| ui / scale[i]).collect();
                return Ok(QpSolution {
                    status: QpStatus::Optimal,
                    x,
                    value,
                    active,
                    multipliers,
                    iterations,
                });
            };
            let np = nmat.column(p).clone_owned();
            let mut u_p = 0.0;

            // step 2: move until p becomes active, dropping blockers on the way
            loop {
                iterations += 1;
                if iterations > max_iter {
                    let value = self.objective(f, &x);
                    let multipliers = active.iter().zip(&u).map(|(&i, &ui)| ui / scale[i]).collect();
                    return Ok(QpSolution {
                        status: QpStatus::MaxIter,
                        x,
                        value,
                        active,
                        multipliers,
                        iterations,
                    });
                }
                let q = active.len();
                let dvec = j.tr_mul(&np);
                let mut z = DVector::zeros(n);
                for col in q..n {
                    z.axpy(dvec[col], &j.column(col), 1.0);
                }
                let mut rr = vec![0.0; q];
                for row in (0..q).rev() {
                    let mut acc = dvec[row];
                    for col in row + 1..q {
                        acc -= r[(row, col)] * rr[col];
                    }
                    rr[row] = acc / r[(row, row)];
                }
                // partial step length
                let mut t1 = f64::INFINITY;
                let mut block = None;
                for k in 0..q {
                    if rr[k] > DEP_TOL {
                        let ratio = u[k] / rr[k];
                        if ratio < t1 {
                            t1 = ratio;
                            block = Some(k);
                        }
                    }
                }
                let zn = z.dot(&np);
                let s_p = np.dot(&x) - bvec[p];
                let t2 = if z.norm() > DEP_TOL && zn > DEP_TOL { -s_p / zn } else { f64::INFINITY };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Ok(self.infeasible(f, x, iterations));
                }
                for k in 0..q {
                    u[k] -= t * rr[k];
                }
                u_p += t;
                if t2.is_finite() {
                    x.axpy(t, &z, 1.0);
                }
                if t2 <= t1 {
                    // full step: p joins the active set
                    add_constraint(&mut j, &mut r, q, dvec);
                    active.push(p);
                    u.push(u_p);
                    is_active[p] = true;
                    break;
                }
                let k = block.expect("partial step has a blocking constraint");
                is_active[active[k]] = false;
                active.remove(k);
                u.remove(k);
                drop_constraint(&mut j, &mut r, q, k);
            }
        }
    }

    fn infeasible(&self, f: &DVector<f64>, x: DVector<f64>, iterations: usize) -> QpSolution {
        QpSolution {
            status: QpStatus::Infeasible,
            value: self.objective(f, &x),
            x,
            active: Vec::new(),
            multipliers: Vec::new(),
            iterations,
        }
    }
}

fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    let h = a.hypot(b);
    if h == 0.0 {
        (1.0, 0.0, 0.0)
    } else {
        (a / h, b / h, h)
    }
}

fn rotate_columns(j: &mut DMatrix<f64>, c0: usize, c1: usize, c: f64, s: f64) {
    for row in 0..j.nrows() {
        let a = j[(row, c0)];
        let b = j[(row, c1)];
        j[(row, c0)] = c * a + s * b;
        j[(row, c1)] = -s * a + c * b;
    }
}

/// Append column `d[..=q]` to `R`, rotating `J` so that `d[q+1..]` vanishes.
fn add_constraint(j: &mut DMatrix<f64>, r: &mut DMatrix<f64>, q: usize, mut d: DVector<f64>) {
    let n = j.nrows();
    for k in (q + 1..n).rev() {
        let (c, s, h) = givens(d[k - 1], d[k]);
        if s == 0.0 {
            continue;
        }
        d[k - 1] = h;
        d[k] = 0.0;
        rotate_columns(j, k - 1, k, c, s);
    }
    for row in 0..=q {
        r[(row, q)] = d[row];
    }
}

/// Remove column `k` of the `q`-column factor `R` and restore triangularity.
fn drop_constraint(j: &mut DMatrix<f64>, r: &mut DMatrix<f64>, q: usize, k: usize) {
    for col in k..q - 1 {
        for row in 0..q {
            r[(row, col)] = r[(row, col + 1)];
        }
    }
    for row in 0..q {
        r[(row, q - 1)] = 0.0;
    }
    for col in k..q - 1 {
        let (c, s, h) = givens(r[(col, col)], r[(col + 1, col)]);
        if s == 0.0 {
            continue;
        }
        r[(col, col)] = h;
        r[(col + 1, col)] = 0.0;
        for cc in col + 1..q - 1 {
            let a = r[(col, cc)];
            let b = r[(col + 1, cc)];
            r[(col, cc)] = c * a + s * b;
            r[(col + 1, cc)] = -s * a + c * b;
        }
        rotate_columns(j, col, col + 1, c, s);
    }
}
