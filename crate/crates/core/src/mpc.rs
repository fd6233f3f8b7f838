//! Condensed tracking MPC with soft state constraints, and the receding-horizon
//! pursuit controller built on it.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::dynamics::{idx, DiscreteModel, InputVector, QuadInput, QuadParams, QuadState, StateVector, NU, NX};
use crate::error::{Error, Result};
use crate::evader::{update_bounds, BoundPriors, EvaderHistory, VehicleState, VelocityBounds};
use crate::polytope::Polytope;
use crate::prediction::{chebyshev_center, predict_sector, PointEstimate, PredictionSector};
use crate::qp::{QpSolver, QpStatus};
use crate::reference::{make_reference, ReferenceAngles};
use crate::terminal::{build_terminal_set, Ball, HULL_SIDES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputCost {
    /// Penalize `u − (0, 0, mg)`.
    #[default]
    Trim,
    /// Penalize `u` itself, gravity compensation included.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub q_diag: [f64; NX],
    pub r_diag: [f64; NU],
    pub slack_quadratic: f64,
    pub slack_linear: f64,
    #[serde(default)]
    pub input_cost: InputCost,
    #[serde(default)]
    pub reference_angles: ReferenceAngles,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.05,
            q_diag: [100.0, 10.0, 1.0, 0.1, 100.0, 10.0, 1.0, 0.1, 100.0, 10.0],
            r_diag: [1.0, 1.0, 0.1],
            slack_quadratic: 1e3,
            slack_linear: 1e4,
            input_cost: InputCost::Trim,
            reference_angles: ReferenceAngles::Flat,
        }
    }
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be >= 1".into()));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.q_diag.iter().any(|q| !(*q >= 0.0) || !q.is_finite()) {
            return Err(Error::InvalidParameter("Q must be positive semidefinite".into()));
        }
        if self.r_diag.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::InvalidParameter("R must be positive definite".into()));
        }
        if !(self.slack_quadratic > 0.0) || !(self.slack_linear > 0.0) {
            return Err(Error::InvalidParameter("slack weights must be > 0".into()));
        }
        Ok(())
    }

    pub fn q(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&self.q_diag))
    }

    pub fn r(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(&self.r_diag))
    }
}

/// Stacked prediction `X = Φ x_0 + Γ U + o` over `k = 0..=N`.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub horizon: usize,
    pub nx: usize,
    pub nu: usize,
    pub phi: DMatrix<f64>,
    pub gamma: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl Prediction {
    pub fn new(a: &DMatrix<f64>, b: &DMatrix<f64>, g: &DVector<f64>, horizon: usize) -> Result<Self> {
        let nx = a.nrows();
        let nu = b.ncols();
        if a.ncols() != nx || b.nrows() != nx || g.len() != nx {
            return Err(Error::Dimension("prediction: inconsistent A, B, G".into()));
        }
        let rows = (horizon + 1) * nx;
        let mut phi = DMatrix::zeros(rows, nx);
        let mut gamma = DMatrix::zeros(rows, horizon * nu);
        let mut offset = DVector::zeros(rows);
        phi.view_mut((0, 0), (nx, nx)).fill_with_identity();
        for k in 1..=horizon {
            let prev_phi = phi.view(((k - 1) * nx, 0), (nx, nx)).into_owned();
            phi.view_mut((k * nx, 0), (nx, nx)).copy_from(&(a * prev_phi));
            let prev_gamma = gamma.view(((k - 1) * nx, 0), (nx, horizon * nu)).into_owned();
            let mut cur = a * prev_gamma;
            cur.view_mut((0, (k - 1) * nu), (nx, nu)).copy_from(b);
            gamma.view_mut((k * nx, 0), (nx, horizon * nu)).copy_from(&cur);
            let prev_off = offset.rows((k - 1) * nx, nx).into_owned();
            offset.rows_mut(k * nx, nx).copy_from(&(a * prev_off + g));
        }
        Ok(Self { horizon, nx, nu, phi, gamma, offset })
    }

    pub fn state_rows(&self, k: usize) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let nx = self.nx;
        (
            self.phi.rows(k * nx, nx).into_owned(),
            self.gamma.rows(k * nx, nx).into_owned(),
            self.offset.rows(k * nx, nx).into_owned(),
        )
    }
}

/// Weights shared by every instance of one controller.
#[derive(Clone, Debug)]
pub struct CostWeights {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub u_ref: DVector<f64>,
    pub slack_quadratic: f64,
    pub slack_linear: f64,
}

/// Everything about the condensed QP that does not depend on the current
/// state, reference or terminal center. Decision layout is `[U; σ]` with one
/// slack per predicted step `k = 1..=N`.
///
/// Constraint rows, in order: soft state rows for `k = 1..=N`, `σ ≥ 0`,
/// input rows for `k = 0..N−1`, hard terminal rows on `x_N`.
#[derive(Clone, Debug)]
pub struct CondensedStructure {
    pub prediction: Prediction,
    pub weights: CostWeights,
    pub state: Polytope,
    pub input: Polytope,
    pub terminal_lhs: DMatrix<f64>,
    pub hessian: DMatrix<f64>,
    pub ineq_a: DMatrix<f64>,
    /// `Q̄Γ` cached for the linear term.
    qgamma: DMatrix<f64>,
}

#[derive(Clone, Debug)]
pub struct CftocProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    /// Cost terms independent of the decision.
    pub constant: f64,
    pub ineq_a: DMatrix<f64>,
    pub ineq_b: DVector<f64>,
    pub n_inputs: usize,
    pub n_slacks: usize,
}

impl CftocProblem {
    pub fn cost(&self, z: &DVector<f64>) -> f64 {
        0.5 * z.dot(&(&self.hessian * z)) + self.linear.dot(z) + self.constant
    }
}

impl CondensedStructure {
    pub fn new(
        prediction: Prediction,
        weights: CostWeights,
        state: &Polytope,
        input: &Polytope,
        terminal_lhs: DMatrix<f64>,
    ) -> Result<Self> {
        let (nx, nu, n) = (prediction.nx, prediction.nu, prediction.horizon);
        if state.dim() != nx || input.dim() != nu || terminal_lhs.ncols() != nx {
            return Err(Error::Dimension("condense: constraint dimensions do not match the model".into()));
        }
        if weights.q.shape() != (nx, nx) || weights.r.shape() != (nu, nu) || weights.u_ref.len() != nu {
            return Err(Error::Dimension("condense: weight dimensions do not match the model".into()));
        }
        let state = state.normalized();
        let nz = n * nu + n;
        let mut qbar = DMatrix::zeros((n + 1) * nx, (n + 1) * nx);
        for k in 0..=n {
            qbar.view_mut((k * nx, k * nx), (nx, nx)).copy_from(&weights.q);
        }
        let qgamma = &qbar * &prediction.gamma;
        let mut hessian = DMatrix::zeros(nz, nz);
        let huu = prediction.gamma.tr_mul(&qgamma) * 2.0;
        hessian.view_mut((0, 0), (n * nu, n * nu)).copy_from(&huu);
        for k in 0..n {
            let r2 = &weights.r * 2.0;
            let mut blk = hessian.view_mut((k * nu, k * nu), (nu, nu));
            blk += r2;
            hessian[(n * nu + k, n * nu + k)] = 2.0 * weights.slack_quadratic;
        }
        // symmetrize away round-off from the products
        let hessian = (&hessian + hessian.transpose()) * 0.5;

        let ms = state.n_rows();
        let mi = input.n_rows();
        let mt = terminal_lhs.nrows();
        let rows = n * ms + n + n * mi + mt;
        let mut a = DMatrix::zeros(rows, nz);
        let mut r = 0;
        for k in 1..=n {
            let (_, gk, _) = prediction.state_rows(k);
            let blk = &state.a * gk;
            a.view_mut((r, 0), (ms, n * nu)).copy_from(&blk);
            for i in 0..ms {
                a[(r + i, n * nu + k - 1)] = -1.0;
            }
            r += ms;
        }
        for k in 0..n {
            a[(r + k, n * nu + k)] = -1.0;
        }
        r += n;
        for k in 0..n {
            a.view_mut((r, k * nu), (mi, nu)).copy_from(&input.a);
            r += mi;
        }
        let (_, gn, _) = prediction.state_rows(n);
        a.view_mut((r, 0), (mt, n * nu)).copy_from(&(&terminal_lhs * gn));

        Ok(Self { prediction, weights, state, input: input.clone(), terminal_lhs, hessian, ineq_a: a, qgamma })
    }

    pub fn n_decision(&self) -> usize {
        self.prediction.horizon * (self.prediction.nu + 1)
    }

    /// Linear term, constant and right-hand sides for one instance.
    pub fn instance(&self, x0: &DVector<f64>, reference: &[DVector<f64>], terminal_rhs: &DVector<f64>) -> Result<CftocProblem> {
        let p = &self.prediction;
        let (nx, nu, n) = (p.nx, p.nu, p.horizon);
        if x0.len() != nx || reference.len() != n + 1 || terminal_rhs.len() != self.terminal_lhs.nrows() {
            return Err(Error::Dimension(format!(
                "instance: x0 has {}, reference has {} points (need {}), terminal rhs has {}",
                x0.len(),
                reference.len(),
                n + 1,
                terminal_rhs.len()
            )));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("initial state is not finite".into()));
        }
        let mut refstack = DVector::zeros((n + 1) * nx);
        for (k, r) in reference.iter().enumerate() {
            if r.len() != nx {
                return Err(Error::Dimension("reference point has the wrong dimension".into()));
            }
            refstack.rows_mut(k * nx, nx).copy_from(r);
        }
        let free = &p.phi * x0 + &p.offset;
        let err = &free - &refstack;
        let nz = self.n_decision();
        let mut linear = DVector::zeros(nz);
        let lu = self.qgamma.tr_mul(&err) * 2.0;
        linear.rows_mut(0, n * nu).copy_from(&lu);
        let rur = &self.weights.r * &self.weights.u_ref;
        for k in 0..n {
            let mut seg = linear.rows_mut(k * nu, nu);
            seg -= &rur * 2.0;
            linear[n * nu + k] = self.weights.slack_linear;
        }
        let mut constant = 0.0;
        for k in 0..=n {
            let e = err.rows(k * nx, nx);
            constant += e.dot(&(&self.weights.q * e));
        }
        constant += n as f64 * self.weights.u_ref.dot(&rur);

        let ms = self.state.n_rows();
        let mi = self.input.n_rows();
        let mt = self.terminal_lhs.nrows();
        let mut b = DVector::zeros(self.ineq_a.nrows());
        let mut r = 0;
        for k in 1..=n {
            let fk = free.rows(k * nx, nx);
            b.rows_mut(r, ms).copy_from(&(&self.state.b - &self.state.a * fk));
            r += ms;
        }
        r += n;
        for _ in 0..n {
            b.rows_mut(r, mi).copy_from(&self.input.b);
            r += mi;
        }
        let fnn = free.rows(n * nx, nx);
        b.rows_mut(r, mt).copy_from(&(terminal_rhs - &self.terminal_lhs * fnn));

        Ok(CftocProblem {
            hessian: self.hessian.clone(),
            linear,
            constant,
            ineq_a: self.ineq_a.clone(),
            ineq_b: b,
            n_inputs: n * nu,
            n_slacks: n,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

impl From<QpStatus> for SolveStatus {
    fn from(s: QpStatus) -> Self {
        match s {
            QpStatus::Optimal => SolveStatus::Optimal,
            QpStatus::Infeasible => SolveStatus::Infeasible,
            QpStatus::MaxIter => SolveStatus::MaxIter,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SolveResult {
    pub inputs: Vec<QuadInput>,
    pub predicted_states: Vec<QuadState>,
    pub cost: f64,
    pub status: SolveStatus,
    pub max_slack: f64,
    pub iterations: usize,
    #[serde(skip)]
    pub active_set: Vec<usize>,
}

fn weights_for(config: &MpcConfig, params: &QuadParams) -> CostWeights {
    let u_ref = match config.input_cost {
        InputCost::Trim => DVector::from_column_slice(params.hover_input().to_vector().as_slice()),
        InputCost::Literal => DVector::zeros(NU),
    };
    CostWeights {
        q: config.q(),
        r: config.r(),
        u_ref,
        slack_quadratic: config.slack_quadratic,
        slack_linear: config.slack_linear,
    }
}

fn model_prediction(model: &DiscreteModel, horizon: usize) -> Result<Prediction> {
    let a = DMatrix::from_fn(NX, NX, |i, j| model.a[(i, j)]);
    let b = DMatrix::from_fn(NX, NU, |i, j| model.b[(i, j)]);
    let g = DVector::from_column_slice(model.g.as_slice());
    Prediction::new(&a, &b, &g, horizon)
}

/// Hard terminal rows: the hull normals on `(x, y)` and the band `0 ≤ z ≤ H`.
fn terminal_lhs() -> DMatrix<f64> {
    let hull = Ball { center: Vector2::zeros(), radius: 1.0 }.circumscribing_polygon(HULL_SIDES);
    let mut a = DMatrix::zeros(HULL_SIDES + 2, NX);
    for i in 0..HULL_SIDES {
        a[(i, idx::X)] = hull.a[(i, 0)];
        a[(i, idx::Y)] = hull.a[(i, 1)];
    }
    a[(HULL_SIDES, idx::Z)] = 1.0;
    a[(HULL_SIDES + 1, idx::Z)] = -1.0;
    a
}

fn terminal_rhs(lhs: &DMatrix<f64>, ball: &Ball, capture_height: f64) -> DVector<f64> {
    let mut b = DVector::zeros(lhs.nrows());
    for i in 0..HULL_SIDES {
        let n = Vector2::new(lhs[(i, idx::X)], lhs[(i, idx::Y)]);
        b[i] = n.dot(&ball.center) + ball.radius;
    }
    b[HULL_SIDES] = capture_height;
    b[HULL_SIDES + 1] = 0.0;
    b
}

/// Condense one instance of the pursuit problem from scratch.
#[allow(clippy::too_many_arguments)]
pub fn condense(
    model: &DiscreteModel,
    params: &QuadParams,
    config: &MpcConfig,
    x0: &QuadState,
    reference: &[QuadState],
    ball: &Ball,
    capture_height: f64,
    state: &Polytope,
    input: &Polytope,
) -> Result<CftocProblem> {
    config.validate()?;
    let lhs = terminal_lhs();
    let structure = CondensedStructure::new(
        model_prediction(model, config.horizon)?,
        weights_for(config, params),
        state,
        input,
        lhs.clone(),
    )?;
    let refs: Vec<DVector<f64>> = reference.iter().map(to_dvec).collect();
    structure.instance(&to_dvec(x0), &refs, &terminal_rhs(&lhs, ball, capture_height))
}

fn to_dvec(x: &QuadState) -> DVector<f64> {
    DVector::from_column_slice(x.to_vector().as_slice())
}

/// Solve a condensed problem and roll the model forward with the inputs so
/// the predicted states satisfy the recursion exactly.
pub fn solve_qp(
    problem: &CftocProblem,
    solver: &QpSolver,
    model: &DiscreteModel,
    x0: &QuadState,
    hint: &[usize],
) -> Result<SolveResult> {
    let sol = solver.solve(&problem.linear, &problem.ineq_a, &problem.ineq_b, hint)?;
    let n = problem.n_slacks;
    let inputs: Vec<QuadInput> = (0..n)
        .map(|k| QuadInput::from_vector(&InputVector::from_fn(|i, _| sol.x[k * NU + i])))
        .collect();
    let mut predicted = Vec::with_capacity(n + 1);
    predicted.push(*x0);
    for u in &inputs {
        let next = model.step(predicted.last().unwrap(), u);
        predicted.push(next);
    }
    let max_slack = (0..n).map(|k| sol.x[problem.n_inputs + k]).fold(0.0, f64::max);
    Ok(SolveResult {
        inputs,
        predicted_states: predicted,
        cost: problem.cost(&sol.x),
        status: sol.status.into(),
        max_slack,
        iterations: sol.iterations,
        active_set: sol.active,
    })
}

/// Everything the pursuit controller needs besides the measurements.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControllerConfig {
    pub mpc: MpcConfig,
    pub quad: QuadParams,
    pub priors: BoundPriors,
    pub history_len: usize,
    pub capture_height: f64,
    pub state_polytope: Polytope,
    pub input_polytope: Polytope,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Diagnostics {
    pub t: f64,
    pub cost: f64,
    pub status: SolveStatus,
    pub max_slack: f64,
    pub iterations: usize,
    pub estimate: PointEstimate,
    pub sector: PredictionSector,
    pub bounds: VelocityBounds,
    pub command: QuadInput,
    /// Whether the command is the held previous one after a failed solve.
    pub fallback: bool,
    /// Predicted terminal position lies in the exact ball, not only its hull.
    pub terminal_in_ball: bool,
    pub reference_end: [f64; 3],
}

/// Receding-horizon pursuit controller. One instance per session; the
/// condensed structure and the Hessian factorization are built once.
#[derive(Clone, Debug)]
pub struct Controller {
    pub config: ControllerConfig,
    pub model: DiscreteModel,
    structure: CondensedStructure,
    solver: QpSolver,
    terminal_lhs: DMatrix<f64>,
    bounds: VelocityBounds,
    history: EvaderHistory,
    last_command: QuadInput,
    last_active: Vec<usize>,
    last_solution: Option<SolveResult>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> Result<Self> {
        config.mpc.validate()?;
        config.quad.validate()?;
        if !(config.capture_height > 0.0) {
            return Err(Error::InvalidParameter("capture height must be > 0".into()));
        }
        if config.state_polytope.dim() != NX || config.input_polytope.dim() != NU {
            return Err(Error::Dimension("controller constraint polytopes have the wrong dimension".into()));
        }
        let model = DiscreteModel::from_params(&config.quad, config.mpc.dt)?;
        let lhs = terminal_lhs();
        let structure = CondensedStructure::new(
            model_prediction(&model, config.mpc.horizon)?,
            weights_for(&config.mpc, &config.quad),
            &config.state_polytope,
            &config.input_polytope,
            lhs.clone(),
        )?;
        let solver = QpSolver::new(structure.hessian.clone())?;
        let bounds = VelocityBounds::from_priors(config.priors)?;
        let history = EvaderHistory::new(config.history_len)?;
        let last_command = config.quad.hover_input();
        Ok(Self {
            config,
            model,
            structure,
            solver,
            terminal_lhs: lhs,
            bounds,
            history,
            last_command,
            last_active: Vec::new(),
            last_solution: None,
        })
    }

    pub fn bounds(&self) -> &VelocityBounds {
        &self.bounds
    }

    pub fn history(&self) -> &EvaderHistory {
        &self.history
    }

    pub fn last_solution(&self) -> Option<&SolveResult> {
        self.last_solution.as_ref()
    }

    /// Forget measurements and solver state.
    pub fn reset(&mut self) -> Result<()> {
        self.bounds = VelocityBounds::from_priors(self.config.priors)?;
        self.history.clear();
        self.last_command = self.config.quad.hover_input();
        self.last_active.clear();
        self.last_solution = None;
        Ok(())
    }

    /// Solve the problem for a given reference and ball, without touching the
    /// vehicle model.
    pub fn solve_for(&self, state: &QuadState, reference: &[QuadState], ball: &Ball, hint: &[usize]) -> Result<SolveResult> {
        let refs: Vec<DVector<f64>> = reference.iter().map(to_dvec).collect();
        let rhs = terminal_rhs(&self.terminal_lhs, ball, self.config.capture_height);
        let problem = self.structure.instance(&to_dvec(state), &refs, &rhs)?;
        solve_qp(&problem, &self.solver, &self.model, state, hint)
    }

    /// One control step: record the vehicle measurement, update the velocity
    /// bounds, predict, build the reference and terminal set, and solve.
    pub fn step(&mut self, t: f64, state: &QuadState, vehicle: &VehicleState) -> Result<(QuadInput, Diagnostics)> {
        if !state.is_finite() || !vehicle.is_finite() {
            return Err(Error::InvalidParameter("non-finite measurement".into()));
        }
        let cfg = &self.config;
        let n = cfg.mpc.horizon;
        let dt = cfg.mpc.dt;
        self.history.push(t, *vehicle)?;
        self.bounds = update_bounds(&self.bounds, &self.history)?;
        let sector = predict_sector(vehicle, &self.bounds, n, dt);
        let estimate = chebyshev_center(&sector)?;
        let reference = make_reference(
            state,
            &estimate,
            &vehicle.velocity(),
            cfg.capture_height,
            n,
            dt,
            &cfg.quad,
            cfg.mpc.reference_angles,
        )?;
        let ball = build_terminal_set(
            vehicle.position(),
            self.bounds.v_max(),
            &cfg.state_polytope,
            n,
            dt,
            cfg.capture_height,
        )?
        .ball;
        let result = self.solve_for(state, &reference, &ball, &self.last_active.clone())?;
        let ok = result.status == SolveStatus::Optimal;
        let command = if ok { result.inputs[0] } else { self.last_command };
        let terminal_in_ball = ok && ball.contains(&result.predicted_states[n].horizontal(), 1e-9);
        let last_ref = reference[n];
        let diag = Diagnostics {
            t,
            cost: result.cost,
            status: result.status,
            max_slack: result.max_slack,
            iterations: result.iterations,
            estimate,
            sector,
            bounds: self.bounds,
            command,
            fallback: !ok,
            terminal_in_ball,
            reference_end: [last_ref.x, last_ref.y, last_ref.z],
        };
        if ok {
            self.last_active = result.active_set.clone();
        }
        self.last_command = command;
        self.last_solution = Some(result);
        Ok((command, diag))
    }
}

/// Stacked residual of `x_{k+1} = A x_k + B u_k + G` along a solution.
pub fn recursion_residual(model: &DiscreteModel, sol: &SolveResult) -> f64 {
    sol.inputs
        .iter()
        .enumerate()
        .map(|(k, u)| {
            let pred: StateVector = model.step_vector(&sol.predicted_states[k].to_vector(), &u.to_vector());
            (pred - sol.predicted_states[k + 1].to_vector()).amax()
        })
        .fold(0.0, f64::max)
}
