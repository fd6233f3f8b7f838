//! Backward reachable sets on the decoupled sub-systems and the
//! conservative feasible-start set built from them.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{idx, Axis, DiscreteModel, QuadState, StateVector, Subsystem};
use crate::error::{Error, Result};
use crate::lp::{self, LpOutcome};
use crate::polytope::Polytope;
use crate::terminal::TerminalSet;

const COEF_EPS: f64 = 1e-12;

/// `Pre(S) = {x : ∃u ∈ [u_lo, u_hi], A x + B u + c ∈ S}` for a sub-system
/// with a scalar input, with `u` removed by Fourier–Motzkin elimination.
pub fn pre_set(sub: &Subsystem, target: &Polytope, u_lo: f64, u_hi: f64) -> Result<Polytope> {
    let n = sub.a.nrows();
    if target.dim() != n || sub.b.ncols() != 1 {
        return Err(Error::Dimension(format!(
            "pre set: target has dimension {}, sub-system {}x{} with {} inputs",
            target.dim(),
            n,
            n,
            sub.b.ncols()
        )));
    }
    if u_lo > u_hi {
        return Err(Error::EmptySet("input interval is empty".into()));
    }
    // rows h·x + g·u ≤ f
    let h_all = &target.a * &sub.a;
    let g_all = &target.a * &sub.b;
    let f_all = &target.b - &target.a * &sub.c;

    let mut free: Vec<(DVector<f64>, f64)> = Vec::new();
    let mut upper: Vec<(DVector<f64>, f64, f64)> = Vec::new();
    let mut lower: Vec<(DVector<f64>, f64, f64)> = Vec::new();
    let scale = g_all.amax().max(1.0);
    for i in 0..target.n_rows() {
        let h = h_all.row(i).transpose();
        let g = g_all[(i, 0)];
        let f = f_all[i];
        if g.abs() <= COEF_EPS * scale {
            free.push((h, f));
        } else if g > 0.0 {
            upper.push((h, g, f));
        } else {
            lower.push((h, g, f));
        }
    }
    if u_hi.is_finite() {
        upper.push((DVector::zeros(n), 1.0, u_hi));
    }
    if u_lo.is_finite() {
        lower.push((DVector::zeros(n), -1.0, -u_lo));
    }

    let mut rows: Vec<(DVector<f64>, f64)> = free;
    for (hi_, gi, fi) in &upper {
        for (hj, gj, fj) in &lower {
            let (a, b) = (*gi, -*gj);
            rows.push((hj * a + hi_ * b, b * fi + a * fj));
        }
    }

    let mut kept_a: Vec<f64> = Vec::new();
    let mut kept_b: Vec<f64> = Vec::new();
    for (h, f) in rows {
        let norm = h.norm();
        if norm <= COEF_EPS {
            if f < -1e-9 {
                return Err(Error::EmptySet("pre set is empty".into()));
            }
            continue;
        }
        kept_a.extend(h.iter().map(|v| v / norm));
        kept_b.push(f / norm);
    }
    let m = kept_b.len();
    Polytope::new(DMatrix::from_row_slice(m, n, &kept_a), DVector::from_vec(kept_b))
}

/// `K_0 = target`, `K_{j+1} = Pre(K_j) ∩ constraint`, returning `K_steps`.
pub fn backward_reachable(
    sub: &Subsystem,
    target: &Polytope,
    constraint: &Polytope,
    u_lo: f64,
    u_hi: f64,
    steps: usize,
) -> Result<Polytope> {
    let mut k = target.intersect(constraint)?.remove_redundant()?;
    for _ in 0..steps {
        let pre = pre_set(sub, &k, u_lo, u_hi)?;
        let next = pre.intersect(constraint)?;
        if next.is_empty()? {
            return Err(Error::EmptySet(format!("{:?} target unreachable in {steps} steps", sub.axis)));
        }
        k = next.remove_redundant()?;
    }
    Ok(k)
}

/// Per-axis targets contained in the terminal set: the square inscribed in
/// the ball for each horizontal axis and the capture band for altitude.
pub fn axis_target(terminal: &TerminalSet, axis: Axis) -> Result<Polytope> {
    let half = terminal.ball.radius / std::f64::consts::SQRT_2;
    let (lo, hi) = match axis {
        Axis::XPitch => (terminal.ball.center.x - half, terminal.ball.center.x + half),
        Axis::YRoll => (terminal.ball.center.y - half, terminal.ball.center.y + half),
        Axis::Altitude => (0.0, terminal.capture_height),
    };
    let n = axis.states().len();
    let mut l = vec![f64::NEG_INFINITY; n];
    let mut h = vec![f64::INFINITY; n];
    l[0] = lo;
    h[0] = hi;
    Polytope::from_box(&l, &h)
}

fn input_interval(input: &Polytope, axis: Axis) -> Result<(f64, f64)> {
    let slice = input.slice(&[axis.input()]);
    let bbox = slice.bounding_box()?;
    Ok(bbox[0])
}

/// The `steps`-step backward reachable set of one sub-system, kept as the
/// polytope over `(x, u_0, …, u_{N−1})` whose projection onto `x` is the set.
/// Explicit projection is avoided because the facet count of the projected
/// set roughly doubles with every step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LiftedSet {
    pub axis: Axis,
    pub state_dim: usize,
    pub lifted: Polytope,
}

impl LiftedSet {
    /// Exact: all intermediate states in `constraint`, the last one in
    /// `target ∩ constraint`, every input in `[u_lo, u_hi]`.
    pub fn new(
        sub: &Subsystem,
        target: &Polytope,
        constraint: &Polytope,
        u_lo: f64,
        u_hi: f64,
        steps: usize,
    ) -> Result<Self> {
        let n = sub.a.nrows();
        let dim = n + steps;
        let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
        let mut push_state_rows = |set: &Polytope, ax: &DMatrix<f64>, au: &DMatrix<f64>, off: &DVector<f64>| {
            for i in 0..set.n_rows() {
                let r = set.a.row(i);
                let mut row = DVector::zeros(dim);
                row.rows_mut(0, n).copy_from(&(r * ax).transpose());
                row.rows_mut(n, steps).copy_from(&(r * au).transpose());
                rows.push((row, set.b[i] - (r * off)[(0, 0)]));
            }
        };
        // x_k = ax·x + au·u + off
        let mut ax = DMatrix::identity(n, n);
        let mut au = DMatrix::zeros(n, steps);
        let mut off = DVector::zeros(n);
        push_state_rows(constraint, &ax, &au, &off);
        for k in 0..steps {
            ax = &sub.a * ax;
            let mut next_au = &sub.a * &au;
            next_au.column_mut(k).copy_from(&sub.b.column(0));
            au = next_au;
            off = &sub.a * off + &sub.c;
            push_state_rows(constraint, &ax, &au, &off);
            if k + 1 == steps {
                push_state_rows(target, &ax, &au, &off);
            }
        }
        for k in 0..steps {
            for (sign, bound) in [(1.0, u_hi), (-1.0, -u_lo)] {
                if bound.is_finite() {
                    let mut row = DVector::zeros(dim);
                    row[n + k] = sign;
                    rows.push((row, bound));
                }
            }
        }
        let mut a = DMatrix::zeros(rows.len(), dim);
        let mut b = DVector::zeros(rows.len());
        let mut m = 0;
        for (row, rhs) in rows {
            let norm = row.norm();
            if norm <= COEF_EPS {
                if rhs < -1e-9 {
                    return Err(Error::EmptySet(format!("{:?} target unreachable", sub.axis)));
                }
                continue;
            }
            a.row_mut(m).copy_from(&(row / norm).transpose());
            b[m] = rhs / norm;
            m += 1;
        }
        let lifted = Polytope::new(a.rows(0, m).into_owned(), b.rows(0, m).into_owned())?;
        if lifted.is_empty()? {
            return Err(Error::EmptySet(format!("{:?} target unreachable in {steps} steps", sub.axis)));
        }
        Ok(Self { axis: sub.axis, state_dim: n, lifted })
    }

    /// Membership of a sub-system state, decided by a feasibility LP over the
    /// input sequence.
    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> Result<bool> {
        let n = self.state_dim;
        let steps = self.lifted.dim() - n;
        let ax = self.lifted.a.columns(0, n);
        let au = self.lifted.a.columns(n, steps).into_owned();
        let rhs = &self.lifted.b - ax * x + DVector::from_element(self.lifted.n_rows(), tol);
        Ok(!matches!(lp::maximize(&DVector::zeros(steps), &au, &rhs)?, LpOutcome::Infeasible))
    }

    /// Bounding box of the projection.
    pub fn bounding_box(&self) -> Result<Vec<(f64, f64)>> {
        let dim = self.lifted.dim();
        (0..self.state_dim)
            .map(|j| {
                let mut e = DVector::zeros(dim);
                e[j] = 1.0;
                let hi = self.lifted.support(&e)?;
                e[j] = -1.0;
                Ok((-self.lifted.support(&e)?, hi))
            })
            .collect()
    }

    /// Rejection sample from the bounding box.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, bbox: &[(f64, f64)], max_tries: usize) -> Result<DVector<f64>> {
        if bbox.iter().any(|(lo, hi)| !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::InvalidParameter("cannot sample an unbounded set".into()));
        }
        for _ in 0..max_tries {
            let x = DVector::from_iterator(
                bbox.len(),
                bbox.iter().map(|(lo, hi)| if hi > lo { rng.gen_range(*lo..=*hi) } else { *lo }),
            );
            if self.contains(&x, 0.0)? {
                return Ok(x);
            }
        }
        Err(Error::EmptySet(format!("no sample accepted in {max_tries} tries")))
    }

    /// Explicit H-representation by repeated Fourier–Motzkin elimination.
    /// Only practical for short horizons.
    pub fn project(&self, sub: &Subsystem, target: &Polytope, constraint: &Polytope, u: (f64, f64)) -> Result<Polytope> {
        backward_reachable(sub, target, constraint, u.0, u.1, self.lifted.dim() - self.state_dim)
    }
}

/// Conservative feasible-start set: the product over the three sub-systems
/// of the states that reach [`axis_target`] in `steps` steps without leaving
/// the state constraints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeasibleStartSet {
    pub parts: Vec<LiftedSet>,
}

impl FeasibleStartSet {
    pub fn contains(&self, x: &QuadState, tol: f64) -> Result<bool> {
        let v = x.to_vector();
        for part in &self.parts {
            let xs = DVector::from_iterator(part.state_dim, part.axis.states().iter().map(|&i| v[i]));
            if !part.contains(&xs, tol)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Independent rejection samples per sub-system, assembled into a state.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<QuadState> {
        let mut v = StateVector::zeros();
        for part in &self.parts {
            let bbox = part.bounding_box()?;
            let xs = part.sample(rng, &bbox, 100_000)?;
            for (k, &i) in part.axis.states().iter().enumerate() {
                v[i] = xs[k];
            }
        }
        Ok(QuadState::from_vector(&v))
    }

    pub fn part(&self, axis: Axis) -> Option<&LiftedSet> {
        self.parts.iter().find(|p| p.axis == axis)
    }
}

/// Requires state and input constraints that do not couple the sub-systems.
pub fn build_feasible_start_set(
    model: &DiscreteModel,
    terminal: &TerminalSet,
    state_polytope: &Polytope,
    input_polytope: &Polytope,
    steps: usize,
) -> Result<FeasibleStartSet> {
    if steps == 0 {
        return Err(Error::InvalidParameter("feasible start set needs at least one step".into()));
    }
    let groups: Vec<&[usize]> = Axis::ALL.iter().map(|a| a.states()).collect();
    if !state_polytope.is_separable(&groups) {
        return Err(Error::InvalidParameter("state constraints couple the sub-systems".into()));
    }
    let inputs: [&[usize]; 3] = [&[idx::THETA_CMD], &[idx::PHI_CMD], &[idx::THRUST]];
    if !input_polytope.is_separable(&inputs) {
        return Err(Error::InvalidParameter("input constraints couple the sub-systems".into()));
    }
    let mut parts = Vec::with_capacity(3);
    for axis in Axis::ALL {
        let sub = model.subsystem(axis);
        let constraint = state_polytope.slice(axis.states());
        let target = axis_target(terminal, axis)?;
        let (lo, hi) = input_interval(input_polytope, axis)?;
        parts.push(LiftedSet::new(&sub, &target, &constraint, lo, hi, steps)?);
    }
    Ok(FeasibleStartSet { parts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::QuadParams;
    use crate::terminal::build_terminal_set;
    use nalgebra::Vector2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn double_integrator(dt: f64) -> Subsystem {
        Subsystem {
            axis: Axis::Altitude,
            states: vec![0, 1],
            input: 0,
            a: DMatrix::from_row_slice(2, 2, &[1.0, dt, 0.0, 1.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.5 * dt * dt, dt]),
            c: DVector::zeros(2),
        }
    }

    fn successor_lp(sub: &Subsystem, s: &Polytope, x: &DVector<f64>, lo: f64, hi: f64) -> bool {
        let a = DMatrix::from_fn(s.n_rows() + 2, 1, |i, _| {
            if i < s.n_rows() {
                (s.a.row(i) * &sub.b)[(0, 0)]
            } else if i == s.n_rows() {
                1.0
            } else {
                -1.0
            }
        });
        let drift = &sub.a * x + &sub.c;
        let mut b = DVector::zeros(s.n_rows() + 2);
        for i in 0..s.n_rows() {
            b[i] = s.b[i] - s.a.row(i).dot(&drift.transpose());
        }
        b[s.n_rows()] = hi;
        b[s.n_rows() + 1] = -lo;
        !matches!(lp::maximize(&DVector::zeros(1), &a, &b).unwrap(), LpOutcome::Infeasible)
    }

    #[test]
    fn pre_matches_grid_enumeration() {
        let sub = double_integrator(0.1);
        let s = Polytope::from_box(&[-1.0, -0.5], &[1.0, 0.5]).unwrap();
        let pre = pre_set(&sub, &s, -1.0, 1.0).unwrap();
        let us: Vec<f64> = (0..=400).map(|k| -1.0 + 2.0 * k as f64 / 400.0).collect();
        let mut checked = 0;
        for i in 0..=60 {
            for j in 0..=60 {
                let x = DVector::from_vec(vec![-1.5 + 3.0 * i as f64 / 60.0, -0.8 + 1.6 * j as f64 / 60.0]);
                let brute = us.iter().any(|&u| {
                    let nx = &sub.a * &x + &sub.b * u;
                    s.contains(&nx, 1e-12)
                });
                let fm = pre.contains(&x, 1e-12);
                // grid points within a cell of the boundary may disagree
                if pre.max_violation(&x).abs() > 1e-3 {
                    assert_eq!(brute, fm, "x = {x:?}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 3000);
    }

    #[test]
    fn pre_agrees_with_feasibility_lp() {
        let m = DiscreteModel::from_params(&QuadParams::default(), 0.05).unwrap();
        let sub = m.subsystem(Axis::XPitch);
        let s = Polytope::from_box(&[-0.5, -0.3, -0.2, -2.0], &[0.5, 0.3, 0.2, 2.0]).unwrap();
        let pre = pre_set(&sub, &s, -0.5, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let x = DVector::from_fn(4, |i, _| rng.gen_range(-1.0..1.0) * [0.7, 0.5, 0.3, 3.0][i]);
            if pre.max_violation(&x).abs() < 1e-9 {
                continue;
            }
            assert_eq!(pre.contains(&x, 0.0), successor_lp(&sub, &s, &x, -0.5, 0.5));
        }
    }

    #[test]
    fn one_step_from_whole_constraint_set() {
        let sub = double_integrator(0.1);
        let x = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        let k1 = backward_reachable(&sub, &x, &x, -1.0, 1.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let p = DVector::from_fn(2, |_, _| rng.gen_range(-1.0..1.0));
            if successor_lp(&sub, &x, &p, -1.0, 1.0) {
                assert!(k1.contains(&p, 1e-9));
            }
        }
    }

    #[test]
    fn reachable_sets_grow_from_an_invariant_target() {
        let sub = double_integrator(0.1);
        let x = Polytope::from_box(&[-2.0, -1.0], &[2.0, 1.0]).unwrap();
        // shrink a box to its maximal control-invariant subset
        let mut inv = Polytope::from_box(&[-0.5, -0.2], &[0.5, 0.2]).unwrap();
        for _ in 0..200 {
            let next = pre_set(&sub, &inv, -1.0, 1.0).unwrap().intersect(&inv).unwrap().remove_redundant().unwrap();
            if inv.is_subset_of(&next, 1e-9).unwrap() {
                break;
            }
            inv = next;
        }
        assert!(inv.is_subset_of(&pre_set(&sub, &inv, -1.0, 1.0).unwrap(), 1e-9).unwrap());
        let mut prev = inv.clone();
        for n in 1..6 {
            let k = backward_reachable(&sub, &inv, &x, -1.0, 1.0, n).unwrap();
            assert!(prev.is_subset_of(&k, 1e-7).unwrap(), "step {n}");
            prev = k;
        }
    }

    #[test]
    fn unreachable_target_is_an_error() {
        let sub = double_integrator(0.1);
        let target = Polytope::from_box(&[10.0, -0.1], &[11.0, 0.1]).unwrap();
        let x = Polytope::from_box(&[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        assert!(matches!(backward_reachable(&sub, &target, &x, -1.0, 1.0, 3), Err(Error::EmptySet(_))));
    }

    #[test]
    fn feasible_start_set_on_desk_scale_model() {
        let m = DiscreteModel::from_params(&QuadParams::default(), 0.05).unwrap();
        let x = Polytope::from_box(
            &[f64::NEG_INFINITY, -2.0, -0.35, -4.0, f64::NEG_INFINITY, -2.0, -0.35, -4.0, 0.0, -1.5],
            &[f64::INFINITY, 2.0, 0.35, 4.0, f64::INFINITY, 2.0, 0.35, 4.0, 3.0, 1.5],
        )
        .unwrap();
        let u = Polytope::from_box(&[-0.5, -0.5, 0.0], &[0.5, 0.5, 9.81]).unwrap();
        let t = build_terminal_set(Vector2::new(0.5, -0.5), 1.0, &x, 20, 0.05, 0.5).unwrap();
        let x0 = build_feasible_start_set(&m, &t, &x, &u, 20).unwrap();
        // a hover at the ball center inside the band is a fixed point in the target
        let hover = QuadState::hover_at(0.5, -0.5, 0.25);
        assert!(x0.contains(&hover, 1e-9).unwrap());
        let far = QuadState::hover_at(5.0, -0.5, 0.25);
        assert!(!x0.contains(&far, 0.0).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let s = x0.sample(&mut rng).unwrap();
            assert!(x.contains(&crate::terminal::state_dvector(&s), 1e-9));
        }
    }

    #[test]
    fn lifted_set_matches_explicit_projection() {
        let sub = double_integrator(0.1);
        let x = Polytope::from_box(&[-2.0, -1.0], &[2.0, 1.0]).unwrap();
        let target = Polytope::from_box(&[-0.3, -0.2], &[0.3, 0.2]).unwrap();
        let lifted = LiftedSet::new(&sub, &target, &x, -1.0, 1.0, 4).unwrap();
        let explicit = lifted.project(&sub, &target, &x, (-1.0, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..2000 {
            let p = DVector::from_vec(vec![rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..1.0)]);
            if explicit.max_violation(&p).abs() < 1e-7 {
                continue;
            }
            assert_eq!(lifted.contains(&p, 0.0).unwrap(), explicit.contains(&p, 0.0), "{p:?}");
        }
    }
}
