//! Terminal ball `B_f`, terminal set `X_f`, the terminal controller and the
//! checks for its invariance conditions.

use nalgebra::{DMatrix, DVector, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{idx, DiscreteModel, QuadInput, QuadState, NU, NX};
use crate::error::{Error, Result};
use crate::lp::{self, LpOutcome};
use crate::polytope::Polytope;

/// Sides of the regular polygon circumscribing `B_f` in the QP.
pub const HULL_SIDES: usize = 16;

/// Horizontal velocity coordinates `(ẋ, ẏ, ż)`.
pub const VELOCITY_COORDS: [usize; 3] = [idx::X_DOT, idx::Y_DOT, idx::Z_DOT];
/// Attitude coordinates `(θ, θ̇, φ, φ̇)`.
pub const ROTATIONAL_COORDS: [usize; 4] = [idx::THETA, idx::THETA_DOT, idx::PHI, idx::PHI_DOT];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vector2<f64>,
    pub radius: f64,
}

impl Ball {
    pub fn contains(&self, p: &Vector2<f64>, tol: f64) -> bool {
        (p - self.center).norm() <= self.radius + tol
    }

    /// Regular `sides`-gon whose edges are tangent to the ball.
    pub fn circumscribing_polygon(&self, sides: usize) -> Polytope {
        let mut a = DMatrix::zeros(sides, 2);
        let mut b = DVector::zeros(sides);
        for k in 0..sides {
            let ang = 2.0 * std::f64::consts::PI * k as f64 / sides as f64;
            let n = Vector2::new(ang.cos(), ang.sin());
            a[(k, 0)] = n.x;
            a[(k, 1)] = n.y;
            b[k] = n.dot(&self.center) + self.radius;
        }
        Polytope { a, b }
    }
}

/// Ball of radius `v_max·N·dt` around the vehicle position.
pub fn build_bf(center: Vector2<f64>, v_max: f64, steps: usize, dt: f64) -> Result<Ball> {
    if !(v_max > 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("need v_max > 0 and dt > 0, got {v_max}, {dt}")));
    }
    if !center.x.is_finite() || !center.y.is_finite() {
        return Err(Error::InvalidParameter("ball center is not finite".into()));
    }
    Ok(Ball { center, radius: v_max * steps as f64 * dt })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TerminalSet {
    pub ball: Ball,
    pub capture_height: f64,
    /// Slice of the state constraints over [`VELOCITY_COORDS`].
    pub velocity_box: Polytope,
    /// Slice of the state constraints over [`ROTATIONAL_COORDS`].
    pub rotational_box: Polytope,
    /// Circumscribing polygon of the ball over `(x, y)`.
    pub polyhedral_hull: Polytope,
    pub state_polytope: Polytope,
}

pub fn build_terminal_set(
    center: Vector2<f64>,
    v_max: f64,
    state_polytope: &Polytope,
    steps: usize,
    dt: f64,
    capture_height: f64,
) -> Result<TerminalSet> {
    if !(capture_height > 0.0) {
        return Err(Error::InvalidParameter(format!("capture height must be > 0, got {capture_height}")));
    }
    if state_polytope.dim() != NX {
        return Err(Error::Dimension(format!("state polytope has dimension {}", state_polytope.dim())));
    }
    let ball = build_bf(center, v_max, steps, dt)?;
    let set = TerminalSet {
        ball,
        capture_height,
        velocity_box: state_polytope.slice(&VELOCITY_COORDS),
        rotational_box: state_polytope.slice(&ROTATIONAL_COORDS),
        polyhedral_hull: ball.circumscribing_polygon(HULL_SIDES),
        state_polytope: state_polytope.clone(),
    };
    // The ball center is the widest point of the horizontal section, so
    // checking the vertical fibre above it decides emptiness.
    let at_center = Polytope::from_box(&[center.x, center.y], &[center.x, center.y])?.embed(&[idx::X, idx::Y], NX);
    let fibre = set.hull_polytope().intersect(&at_center)?;
    if fibre.is_empty()? {
        return Err(Error::EmptySet("terminal set does not meet the state constraints".into()));
    }
    Ok(set)
}

impl TerminalSet {
    /// Exact membership: ball, height band and state constraints.
    pub fn contains(&self, x: &QuadState, tol: f64) -> bool {
        self.ball.contains(&x.horizontal(), tol)
            && x.z >= -tol
            && x.z <= self.capture_height + tol
            && self.state_polytope.contains(&state_dvector(x), tol)
    }

    /// Membership with the ball replaced by its circumscribing polygon.
    pub fn hull_contains(&self, x: &QuadState, tol: f64) -> bool {
        self.hull_polytope().contains(&state_dvector(x), tol)
    }

    /// The 10-D polytope `(hull × [0, H]) ∩ X`.
    pub fn hull_polytope(&self) -> Polytope {
        let hull = self.polyhedral_hull.embed(&[idx::X, idx::Y], NX);
        let mut a = DMatrix::zeros(2, NX);
        a[(0, idx::Z)] = 1.0;
        a[(1, idx::Z)] = -1.0;
        let height = Polytope { a, b: DVector::from_vec(vec![self.capture_height, 0.0]) };
        Polytope {
            a: concat_rows(&[&hull.a, &height.a, &self.state_polytope.a]),
            b: DVector::from_iterator(
                hull.n_rows() + 2 + self.state_polytope.n_rows(),
                hull.b.iter().chain(height.b.iter()).chain(self.state_polytope.b.iter()).copied(),
            ),
        }
    }

    /// The same set translated to a new ball center.
    pub fn recentered(&self, center: Vector2<f64>) -> TerminalSet {
        let ball = Ball { center, radius: self.ball.radius };
        TerminalSet { ball, polyhedral_hull: ball.circumscribing_polygon(HULL_SIDES), ..self.clone() }
    }
}

fn concat_rows(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.iter().map(|m| m.nrows()).sum();
    let cols = blocks[0].ncols();
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for m in blocks {
        out.view_mut((r, 0), (m.nrows(), cols)).copy_from(*m);
        r += m.nrows();
    }
    out
}

pub(crate) fn state_dvector(x: &QuadState) -> DVector<f64> {
    DVector::from_column_slice(x.to_vector().as_slice())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TerminalControllerResult {
    /// `(u, 0)`: attitude commands with zero collective thrust.
    pub input: QuadInput,
    /// Unit vector toward the ball center, zero when already above it.
    pub direction: Vector2<f64>,
    /// Signed one-step horizontal displacement along `direction`.
    pub displacement: f64,
    pub degenerate: bool,
}

/// Inputs `(u, 0) ∈ U` whose one-step horizontal displacement
/// `[e_1 e_5]ᵀ(A_T − I)x + B†_T u` points at `center`; returns the one that
/// moves furthest. `B†_T` is invertible, so the admissible inputs form a
/// segment `u(s) = B†⁻¹(s·d − w)` and the search is an interval in `s`.
pub fn terminal_controller(
    x: &QuadState,
    center: &Vector2<f64>,
    model: &DiscreteModel,
    input_polytope: &Polytope,
) -> Result<TerminalControllerResult> {
    if input_polytope.dim() != NU {
        return Err(Error::Dimension(format!("input polytope has dimension {}", input_polytope.dim())));
    }
    let to_center = center - x.horizontal();
    let dist = to_center.norm();
    if dist < 1e-12 {
        let input = QuadInput { theta_cmd: 0.0, phi_cmd: 0.0, thrust: 0.0 };
        if !input_polytope.contains(&DVector::from_column_slice(input.to_vector().as_slice()), 1e-12) {
            return Err(Error::Infeasible("zero input is outside U".into()));
        }
        return Ok(TerminalControllerResult {
            input,
            direction: Vector2::zeros(),
            displacement: 0.0,
            degenerate: true,
        });
    }
    let d = to_center / dist;
    let bd = model.horizontal_input_gain();
    let bd_inv = bd.try_inverse().ok_or(Error::DegenerateDirection)?;
    let xv = x.to_vector();
    let drift = model.a * xv - xv;
    let w = Vector2::new(drift[idx::X], drift[idx::Y]);
    let u0 = -(bd_inv * w);
    let u1 = bd_inv * d;

    let (mut lo, mut hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for i in 0..input_polytope.n_rows() {
        let r = input_polytope.a.row(i);
        let slope = r[0] * u1.x + r[1] * u1.y;
        let rhs = input_polytope.b[i] - (r[0] * u0.x + r[1] * u0.y);
        if slope.abs() < 1e-14 {
            if rhs < -1e-12 {
                return Err(Error::Infeasible("no attitude command satisfies U with zero thrust".into()));
            }
        } else if slope > 0.0 {
            hi = hi.min(rhs / slope);
        } else {
            lo = lo.max(rhs / slope);
        }
    }
    if lo > hi + 1e-12 || !hi.is_finite() {
        return Err(Error::Infeasible(format!(
            "no admissible input moves toward the center (interval [{lo}, {hi}])"
        )));
    }
    let s = hi;
    let u = u0 + u1 * s;
    Ok(TerminalControllerResult {
        input: QuadInput { theta_cmd: u.x, phi_cmd: u.y, thrust: 0.0 },
        direction: d,
        displacement: s,
        degenerate: false,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lemma2Report {
    /// `[−V̄Δt, V̄Δt] ⊆ Δx ∩ Δy`
    pub condition1: bool,
    pub delta_x: (f64, f64),
    pub delta_y: (f64, f64),
    pub required_step: f64,
    /// Every sampled terminal state has some successor in `X`.
    pub condition2: bool,
    pub condition2_samples: usize,
    pub condition2_failures: usize,
    pub condition2_witness: Option<QuadState>,
    /// The attitude section of `U` at zero thrust holds an open ball around
    /// the origin, which is where the terminal controller acts.
    pub condition3: bool,
    /// Depth of the origin inside that zero-thrust section.
    pub section_depth: f64,
    pub input_chebyshev_radius: f64,
    /// Signed distance from the zero input to the boundary of the full `U`.
    pub origin_depth: f64,
}

impl Lemma2Report {
    pub fn all_hold(&self) -> bool {
        self.condition1 && self.condition2 && self.condition3
    }
}

/// Range of `e_iᵀ((A_T − I)X ⊕ B_T U)` for state row `row`.
fn displacement_interval(model: &DiscreteModel, x: &Polytope, u: &Polytope, row: usize) -> Result<(f64, f64)> {
    let am = model.a - nalgebra::SMatrix::<f64, NX, NX>::identity();
    let dx = DVector::from_fn(NX, |j, _| am[(row, j)]);
    let du = DVector::from_fn(NU, |j, _| model.b[(row, j)]);
    let hi = x.support(&dx)? + u.support(&du)?;
    let lo = -(x.support(&-&dx)? + u.support(&-&du)?);
    Ok((lo, hi))
}

/// Whether some `u ∈ U` maps `x` into `X` in one step.
/// `b_i / ‖a_i‖` over the first `cols` input coordinates.
fn row_depth(p: &Polytope, i: usize, cols: usize) -> f64 {
    let r = p.a.row(i);
    let norm = (0..cols).map(|j| r[j] * r[j]).sum::<f64>().sqrt();
    p.b[i] / norm
}

pub fn has_admissible_successor(model: &DiscreteModel, x: &QuadState, state: &Polytope, input: &Polytope) -> Result<bool> {
    let drift = model.a * x.to_vector() + model.g;
    let b_dense = DMatrix::from_fn(NX, NU, |i, j| model.b[(i, j)]);
    let rows_x = &state.a * &b_dense;
    let rhs_x = &state.b - &state.a * DVector::from_column_slice(drift.as_slice());
    let a = concat_rows(&[&rows_x, &input.a]);
    let b = DVector::from_iterator(a.nrows(), rhs_x.iter().chain(input.b.iter()).copied());
    Ok(!matches!(lp::maximize(&DVector::zeros(NU), &a, &b)?, LpOutcome::Infeasible))
}

pub fn check_lemma2_conditions(
    model: &DiscreteModel,
    state_polytope: &Polytope,
    input_polytope: &Polytope,
    v_max: f64,
    terminal: &TerminalSet,
    samples: usize,
    seed: u64,
) -> Result<Lemma2Report> {
    let required = v_max * model.dt;
    let delta_x = displacement_interval(model, state_polytope, input_polytope, idx::X)?;
    let delta_y = displacement_interval(model, state_polytope, input_polytope, idx::Y)?;
    let covers = |(lo, hi): (f64, f64)| lo <= -required && hi >= required;
    let condition1 = covers(delta_x) && covers(delta_y);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hull = terminal.hull_polytope();
    let bbox = hull.bounding_box()?;
    let mut failures = 0;
    let mut witness = None;
    let mut drawn = 0;
    while drawn < samples {
        let v = hull.sample_in_box(&mut rng, &bbox, 100_000)?;
        let x = QuadState::from_vector(&nalgebra::SVector::<f64, NX>::from_column_slice(v.as_slice()));
        if !terminal.contains(&x, 0.0) {
            continue;
        }
        drawn += 1;
        if !has_admissible_successor(model, &x, state_polytope, input_polytope)? {
            failures += 1;
            witness.get_or_insert(x);
        }
    }

    let (radius, depth) = match input_polytope.chebyshev_ball(1e6)? {
        Some((_, r)) => (r, (0..input_polytope.n_rows()).map(|i| row_depth(input_polytope, i, 3)).fold(f64::INFINITY, f64::min)),
        None => (0.0, f64::NEG_INFINITY),
    };
    // at zero thrust a row with no attitude part only needs b_i >= 0
    let section_depth = (0..input_polytope.n_rows())
        .map(|i| {
            let r = input_polytope.a.row(i);
            if r[0].hypot(r[1]) < 1e-14 {
                if input_polytope.b[i] >= 0.0 { f64::INFINITY } else { f64::NEG_INFINITY }
            } else {
                row_depth(input_polytope, i, 2)
            }
        })
        .fold(f64::INFINITY, f64::min);
    Ok(Lemma2Report {
        condition1,
        delta_x,
        delta_y,
        required_step: required,
        condition2: failures == 0,
        condition2_samples: samples,
        condition2_failures: failures,
        condition2_witness: witness,
        condition3: section_depth > 0.0,
        section_depth,
        input_chebyshev_radius: radius,
        origin_depth: depth,
    })
}
