//! H-representation polytopes `{x : Ax ≤ b}` and the LP-backed operations
//! the set constructions need.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{self, LpOutcome};

/// Rows with a norm below this are considered all-zero.
const ZERO_ROW: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polytope {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Polytope {
    pub fn new(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self> {
        if a.nrows() != b.len() {
            return Err(Error::Dimension(format!("A has {} rows but b has {}", a.nrows(), b.len())));
        }
        for i in 0..a.nrows() {
            if a.row(i).norm() < ZERO_ROW {
                return Err(Error::InvalidParameter(format!("polytope row {i} is all zero")));
            }
            if !b[i].is_finite() || a.row(i).iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter(format!("polytope row {i} is not finite")));
            }
        }
        Ok(Self { a, b })
    }

    /// The whole space of dimension `n` (no rows).
    pub fn universe(n: usize) -> Self {
        Self { a: DMatrix::zeros(0, n), b: DVector::zeros(0) }
    }

    /// Axis-aligned box; infinite bounds produce no row.
    pub fn from_box(lo: &[f64], hi: &[f64]) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension("box bound lengths differ".into()));
        }
        let n = lo.len();
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
        for j in 0..n {
            if lo[j] > hi[j] {
                return Err(Error::EmptySet(format!("box bound {j}: {} > {}", lo[j], hi[j])));
            }
            if hi[j].is_finite() {
                let mut r = vec![0.0; n];
                r[j] = 1.0;
                rows.push((r, hi[j]));
            }
            if lo[j].is_finite() {
                let mut r = vec![0.0; n];
                r[j] = -1.0;
                rows.push((r, -lo[j]));
            }
        }
        Ok(Self::from_rows(n, &rows))
    }

    fn from_rows(n: usize, rows: &[(Vec<f64>, f64)]) -> Self {
        let a = DMatrix::from_fn(rows.len(), n, |i, j| rows[i].0[j]);
        let b = DVector::from_fn(rows.len(), |i, _| rows[i].1);
        Self { a, b }
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn n_rows(&self) -> usize {
        self.a.nrows()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (0..self.n_rows()).all(|i| self.a.row(i).dot(&x.transpose()) <= self.b[i] + tol)
    }

    /// Largest violation `max(Ax - b)`, or `-inf` without rows.
    pub fn max_violation(&self, x: &DVector<f64>) -> f64 {
        (0..self.n_rows())
            .map(|i| self.a.row(i).dot(&x.transpose()) - self.b[i])
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        if self.dim() != other.dim() {
            return Err(Error::Dimension(format!("intersect {}-D with {}-D", self.dim(), other.dim())));
        }
        let mut a = DMatrix::zeros(self.n_rows() + other.n_rows(), self.dim());
        a.view_mut((0, 0), (self.n_rows(), self.dim())).copy_from(&self.a);
        a.view_mut((self.n_rows(), 0), (other.n_rows(), self.dim())).copy_from(&other.a);
        let b = DVector::from_iterator(a.nrows(), self.b.iter().chain(other.b.iter()).copied());
        Ok(Polytope { a, b })
    }

    /// `max dᵀx` over the set; `+inf` when unbounded in that direction.
    pub fn support(&self, d: &DVector<f64>) -> Result<f64> {
        match lp::maximize(d, &self.a, &self.b)? {
            LpOutcome::Optimal { value, .. } => Ok(value),
            LpOutcome::Unbounded => Ok(f64::INFINITY),
            LpOutcome::Infeasible => Err(Error::EmptySet("support of an empty polytope".into())),
        }
    }

    /// Largest inscribed ball `(center, radius)`; `None` if the set is empty.
    /// The radius is capped at `cap` so unbounded sets still return a point.
    pub fn chebyshev_ball(&self, cap: f64) -> Result<Option<(DVector<f64>, f64)>> {
        let n = self.dim();
        let m = self.n_rows();
        let mut a = DMatrix::zeros(m + 1, n + 1);
        let mut b = DVector::zeros(m + 1);
        for i in 0..m {
            for j in 0..n {
                a[(i, j)] = self.a[(i, j)];
            }
            a[(i, n)] = self.a.row(i).norm();
            b[i] = self.b[i];
        }
        a[(m, n)] = 1.0;
        b[m] = cap;
        let mut c = DVector::zeros(n + 1);
        c[n] = 1.0;
        match lp::maximize(&c, &a, &b)? {
            LpOutcome::Optimal { x, .. } => {
                let r = x[n];
                if r < -1e-9 {
                    return Ok(None);
                }
                Ok(Some((x.rows(0, n).into_owned(), r.max(0.0))))
            }
            LpOutcome::Infeasible => Ok(None),
            LpOutcome::Unbounded => Err(Error::Lp("chebyshev LP unbounded despite radius cap".into())),
        }
    }

    pub fn is_empty(&self) -> Result<bool> {
        if self.n_rows() == 0 {
            return Ok(false);
        }
        Ok(self.chebyshev_ball(1.0)?.is_none())
    }

    /// Per-coordinate `(min, max)`, possibly infinite.
    pub fn bounding_box(&self) -> Result<Vec<(f64, f64)>> {
        (0..self.dim())
            .map(|j| {
                let mut e = DVector::zeros(self.dim());
                e[j] = 1.0;
                let hi = self.support(&e)?;
                e[j] = -1.0;
                let lo = -self.support(&e)?;
                Ok((lo, hi))
            })
            .collect()
    }

    /// `self ⊆ other`, checked row by row with support LPs.
    pub fn is_subset_of(&self, other: &Polytope, tol: f64) -> Result<bool> {
        for i in 0..other.n_rows() {
            let d = other.a.row(i).transpose();
            if self.support(&d)? > other.b[i] + tol {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Normalize rows to unit length and drop exact duplicates, keeping the
    /// tightest right-hand side among parallel rows.
    pub fn normalized(&self) -> Polytope {
        let n = self.dim();
        let mut rows: Vec<(Vec<f64>, f64)> = Vec::with_capacity(self.n_rows());
        'outer: for i in 0..self.n_rows() {
            let norm = self.a.row(i).norm();
            let r: Vec<f64> = self.a.row(i).iter().map(|v| v / norm).collect();
            let rhs = self.b[i] / norm;
            for (existing, eb) in rows.iter_mut() {
                if existing.iter().zip(&r).all(|(p, q)| (p - q).abs() < 1e-10) {
                    *eb = eb.min(rhs);
                    continue 'outer;
                }
            }
            rows.push((r, rhs));
        }
        Self::from_rows(n, &rows)
    }

    /// Remove rows implied by the others.
    ///
    /// Candidates are screened against the rows kept so far (a row implied by
    /// a subset is implied by the whole set), then a second pass re-checks
    /// each kept row against the remaining kept rows.
    pub fn remove_redundant(&self) -> Result<Polytope> {
        let p = self.normalized();
        let n = p.dim();
        let tol = 1e-9;
        let row = |i: usize| p.a.row(i).transpose();

        let mut kept: Vec<usize> = Vec::new();
        for i in 0..p.n_rows() {
            if kept.is_empty() {
                kept.push(i);
                continue;
            }
            let sub = p.select(&kept);
            match lp::maximize(&row(i), &sub.a, &sub.b)? {
                LpOutcome::Optimal { value, .. } if value <= p.b[i] + tol => {}
                LpOutcome::Infeasible => return Err(Error::EmptySet("redundancy removal on empty set".into())),
                _ => kept.push(i),
            }
        }

        let mut k = 0;
        while k < kept.len() {
            let i = kept[k];
            let others: Vec<usize> = kept.iter().copied().filter(|&j| j != i).collect();
            if others.is_empty() {
                break;
            }
            let sub = p.select(&others);
            let redundant = match lp::maximize(&row(i), &sub.a, &sub.b)? {
                LpOutcome::Optimal { value, .. } => value <= p.b[i] + tol,
                LpOutcome::Infeasible => return Err(Error::EmptySet("redundancy removal on empty set".into())),
                LpOutcome::Unbounded => false,
            };
            if redundant {
                kept.remove(k);
            } else {
                k += 1;
            }
        }
        let out = p.select(&kept);
        debug_assert_eq!(out.dim(), n);
        Ok(out)
    }

    pub fn select(&self, rows: &[usize]) -> Polytope {
        let a = DMatrix::from_fn(rows.len(), self.dim(), |i, j| self.a[(rows[i], j)]);
        let b = DVector::from_fn(rows.len(), |i, _| self.b[rows[i]]);
        Polytope { a, b }
    }

    /// Rows whose support lies within `coords`, re-expressed over those
    /// coordinates only.
    pub fn slice(&self, coords: &[usize]) -> Polytope {
        let rows: Vec<usize> = (0..self.n_rows())
            .filter(|&i| (0..self.dim()).all(|j| coords.contains(&j) || self.a[(i, j)] == 0.0))
            .collect();
        let a = DMatrix::from_fn(rows.len(), coords.len(), |i, j| self.a[(rows[i], coords[j])]);
        let b = DVector::from_fn(rows.len(), |i, _| self.b[rows[i]]);
        Polytope { a, b }
    }

    /// Whether every row touches only coordinates from one of `groups`.
    pub fn is_separable(&self, groups: &[&[usize]]) -> bool {
        (0..self.n_rows()).all(|i| {
            let support: Vec<usize> = (0..self.dim()).filter(|&j| self.a[(i, j)] != 0.0).collect();
            groups.iter().any(|g| support.iter().all(|j| g.contains(j)))
        })
    }

    /// Lift a polytope over `coords` into dimension `n`.
    pub fn embed(&self, coords: &[usize], n: usize) -> Polytope {
        let mut a = DMatrix::zeros(self.n_rows(), n);
        for i in 0..self.n_rows() {
            for (k, &j) in coords.iter().enumerate() {
                a[(i, j)] = self.a[(i, k)];
            }
        }
        Polytope { a, b: self.b.clone() }
    }

    /// Uniform sample by rejection from the bounding box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, max_tries: usize) -> Result<DVector<f64>> {
        let bbox = self.bounding_box()?;
        self.sample_in_box(rng, &bbox, max_tries)
    }

    pub fn sample_in_box<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        bbox: &[(f64, f64)],
        max_tries: usize,
    ) -> Result<DVector<f64>> {
        if bbox.iter().any(|(lo, hi)| !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::InvalidParameter("cannot sample an unbounded polytope".into()));
        }
        for _ in 0..max_tries {
            let x = DVector::from_iterator(
                bbox.len(),
                bbox.iter().map(|(lo, hi)| if hi > lo { rng.gen_range(*lo..=*hi) } else { *lo }),
            );
            if self.contains(&x, 0.0) {
                return Ok(x);
            }
        }
        Err(Error::EmptySet(format!("no sample accepted in {max_tries} tries")))
    }

    /// `A` as CSV then `b` as CSV.
    pub fn write_csv<W1: Write, W2: Write>(&self, a_out: W1, mut b_out: W2) -> std::io::Result<()> {
        crate::dynamics::write_matrix_csv(a_out, &self.a)?;
        for v in self.b.iter() {
            writeln!(b_out, "{v:e}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn unit_square() -> Polytope {
        Polytope::from_box(&[0.0, 0.0], &[1.0, 1.0]).unwrap()
    }

    #[test]
    fn zero_rows_rejected() {
        let a = DMatrix::from_row_slice(1, 2, &[0.0, 0.0]);
        assert!(Polytope::new(a, DVector::from_vec(vec![1.0])).is_err());
    }

    #[test]
    fn chebyshev_of_square() {
        let (c, r) = unit_square().chebyshev_ball(10.0).unwrap().unwrap();
        assert!((c - DVector::from_vec(vec![0.5, 0.5])).norm() < 1e-9);
        assert!((r - 0.5).abs() < 1e-9);
    }

    #[test]
    fn empty_detection() {
        let p = Polytope::from_box(&[0.0], &[1.0]).unwrap();
        let q = Polytope::from_box(&[2.0], &[3.0]).unwrap();
        assert!(p.intersect(&q).unwrap().is_empty().unwrap());
        assert!(!p.is_empty().unwrap());
    }

    #[test]
    fn redundant_rows_removed() {
        let mut rows = unit_square();
        rows = rows
            .intersect(&Polytope::new(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_vec(vec![5.0])).unwrap())
            .unwrap();
        rows = rows.intersect(&Polytope::from_box(&[-1.0, -1.0], &[2.0, 2.0]).unwrap()).unwrap();
        let pruned = rows.remove_redundant().unwrap();
        assert_eq!(pruned.n_rows(), 4);
        assert!(pruned.is_subset_of(&unit_square(), 1e-9).unwrap());
        assert!(unit_square().is_subset_of(&pruned, 1e-9).unwrap());
    }

    #[test]
    fn slice_and_embed() {
        let p = Polytope::from_box(&[0.0, -1.0, 2.0], &[1.0, 1.0, 3.0]).unwrap();
        let s = p.slice(&[0, 2]);
        assert_eq!(s.dim(), 2);
        assert_eq!(s.n_rows(), 4);
        let e = s.embed(&[0, 2], 3);
        assert!(e.contains(&DVector::from_vec(vec![0.5, 100.0, 2.5]), 0.0));
        assert!(p.is_separable(&[&[0], &[1], &[2]]));
    }

    #[test]
    fn sampling_stays_inside() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let tri = Polytope::new(
            DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 0.0, -1.0, 1.0, 1.0]),
            DVector::from_vec(vec![0.0, 0.0, 1.0]),
        )
        .unwrap();
        for _ in 0..100 {
            let x = tri.sample(&mut rng, 1000).unwrap();
            assert!(tri.contains(&x, 0.0));
        }
    }
}
