//! Linearized quadcopter model (attitude loop closed onboard) and its exact
//! zero-order-hold discretization.
//!
//! State ordering is `[x ẋ θ θ̇ y ẏ φ φ̇ z ż]` and input ordering is
//! `[θ_cmd φ_cmd T_z]`. The index constants in [`idx`] are used everywhere a
//! selector is needed, so the ordering must not change.

use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NX: usize = 10;
pub const NU: usize = 3;

pub type StateVector = SVector<f64, NX>;
pub type InputVector = SVector<f64, NU>;
pub type StateMatrix = SMatrix<f64, NX, NX>;
pub type InputMatrix = SMatrix<f64, NX, NU>;

/// Positions of each state and input in their vectors.
pub mod idx {
    pub const X: usize = 0;
    pub const X_DOT: usize = 1;
    pub const THETA: usize = 2;
    pub const THETA_DOT: usize = 3;
    pub const Y: usize = 4;
    pub const Y_DOT: usize = 5;
    pub const PHI: usize = 6;
    pub const PHI_DOT: usize = 7;
    pub const Z: usize = 8;
    pub const Z_DOT: usize = 9;

    pub const THETA_CMD: usize = 0;
    pub const PHI_CMD: usize = 1;
    pub const THRUST: usize = 2;
}

/// Largest discretization step accepted by [`discretize`].
pub const MAX_DT: f64 = 10.0;

/// Identified closed-loop attitude parameters plus mass and gravity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadParams {
    pub a_r: f64,
    pub a_p: f64,
    pub b_r1: f64,
    pub b_r0: f64,
    pub b_p1: f64,
    pub b_p0: f64,
    pub mass: f64,
    pub gravity: f64,
}

impl Default for QuadParams {
    /// Placeholder values; real ones come from system identification.
    fn default() -> Self {
        Self {
            a_r: 30.0,
            a_p: 30.0,
            b_r1: 7.0,
            b_r0: 35.0,
            b_p1: 7.0,
            b_p0: 35.0,
            mass: 0.5,
            gravity: 9.81,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.a_r, self.a_p, self.b_r1, self.b_r0, self.b_p1, self.b_p0, self.mass, self.gravity,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("quad parameters must be finite".into()));
        }
        if self.mass <= 0.0 {
            return Err(Error::InvalidParameter(format!("mass must be > 0, got {}", self.mass)));
        }
        if self.gravity <= 0.0 {
            return Err(Error::InvalidParameter(format!("gravity must be > 0, got {}", self.gravity)));
        }
        for (name, v) in [("b_r1", self.b_r1), ("b_r0", self.b_r0), ("b_p1", self.b_p1), ("b_p0", self.b_p0)] {
            if v <= 0.0 {
                return Err(Error::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.a_r == 0.0 || self.a_p == 0.0 {
            return Err(Error::InvalidParameter("a_r and a_p must be nonzero".into()));
        }
        Ok(())
    }

    /// Thrust that balances gravity.
    pub fn hover_thrust(&self) -> f64 {
        self.mass * self.gravity
    }

    pub fn hover_input(&self) -> QuadInput {
        QuadInput { theta_cmd: 0.0, phi_cmd: 0.0, thrust: self.hover_thrust() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadState {
    pub x: f64,
    pub x_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub y: f64,
    pub y_dot: f64,
    pub phi: f64,
    pub phi_dot: f64,
    pub z: f64,
    pub z_dot: f64,
}

impl QuadState {
    pub fn hover_at(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z, ..Self::default() }
    }

    pub fn to_vector(&self) -> StateVector {
        StateVector::from_column_slice(&[
            self.x,
            self.x_dot,
            self.theta,
            self.theta_dot,
            self.y,
            self.y_dot,
            self.phi,
            self.phi_dot,
            self.z,
            self.z_dot,
        ])
    }

    pub fn from_vector(v: &StateVector) -> Self {
        Self {
            x: v[idx::X],
            x_dot: v[idx::X_DOT],
            theta: v[idx::THETA],
            theta_dot: v[idx::THETA_DOT],
            y: v[idx::Y],
            y_dot: v[idx::Y_DOT],
            phi: v[idx::PHI],
            phi_dot: v[idx::PHI_DOT],
            z: v[idx::Z],
            z_dot: v[idx::Z_DOT],
        }
    }

    /// `[e_1 e_5]ᵀ X`
    pub fn horizontal(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QuadInput {
    pub theta_cmd: f64,
    pub phi_cmd: f64,
    pub thrust: f64,
}

impl QuadInput {
    pub fn to_vector(&self) -> InputVector {
        InputVector::new(self.theta_cmd, self.phi_cmd, self.thrust)
    }

    pub fn from_vector(v: &InputVector) -> Self {
        Self { theta_cmd: v[0], phi_cmd: v[1], thrust: v[2] }
    }
}

/// `Ẋ = A X + B U + G`
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousModel {
    pub a: StateMatrix,
    pub b: InputMatrix,
    pub g: StateVector,
}

/// `X_{k+1} = A_T X_k + B_T U_k + G_T`
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteModel {
    pub a: StateMatrix,
    pub b: InputMatrix,
    pub g: StateVector,
    pub dt: f64,
}

pub fn build_continuous(params: &QuadParams) -> Result<ContinuousModel> {
    params.validate()?;
    let g = params.gravity;
    let mut a = StateMatrix::zeros();
    a[(idx::X, idx::X_DOT)] = 1.0;
    a[(idx::X_DOT, idx::THETA)] = g;
    a[(idx::THETA, idx::THETA_DOT)] = 1.0;
    a[(idx::THETA_DOT, idx::THETA)] = -params.b_p0;
    a[(idx::THETA_DOT, idx::THETA_DOT)] = -params.b_p1;
    a[(idx::Y, idx::Y_DOT)] = 1.0;
    a[(idx::Y_DOT, idx::PHI)] = -g;
    a[(idx::PHI, idx::PHI_DOT)] = 1.0;
    a[(idx::PHI_DOT, idx::PHI)] = -params.b_r0;
    a[(idx::PHI_DOT, idx::PHI_DOT)] = -params.b_r1;
    a[(idx::Z, idx::Z_DOT)] = 1.0;

    // Signs as identified: positive commands produce negative angular acceleration.
    let mut b = InputMatrix::zeros();
    b[(idx::THETA_DOT, idx::THETA_CMD)] = -params.a_p;
    b[(idx::PHI_DOT, idx::PHI_CMD)] = -params.a_r;
    b[(idx::Z_DOT, idx::THRUST)] = 1.0 / params.mass;

    let mut gv = StateVector::zeros();
    gv[idx::Z_DOT] = -g;
    Ok(ContinuousModel { a, b, g: gv })
}

/// Exact ZOH discretization through the exponential of the augmented matrix
/// `[[A, B, G], [0, 0, 0]]·dt`, whose top block row is `[A_T, B_T, G_T]`.
pub fn discretize(model: &ContinuousModel, dt: f64) -> Result<DiscreteModel> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("dt must be > 0, got {dt}")));
    }
    if dt > MAX_DT {
        return Err(Error::InvalidParameter(format!("dt must be <= {MAX_DT} s, got {dt}")));
    }
    let n = NX + NU + 1;
    let mut aug = DMatrix::<f64>::zeros(n, n);
    aug.view_mut((0, 0), (NX, NX)).copy_from(&model.a);
    aug.view_mut((0, NX), (NX, NU)).copy_from(&model.b);
    aug.view_mut((0, NX + NU), (NX, 1)).copy_from(&model.g);
    let e = (aug * dt).exp();

    let a = StateMatrix::from_fn(|i, j| e[(i, j)]);
    let b = InputMatrix::from_fn(|i, j| e[(i, NX + j)]);
    let g = StateVector::from_fn(|i, _| e[(i, NX + NU)]);
    Ok(DiscreteModel { a, b, g, dt })
}

impl DiscreteModel {
    pub fn from_params(params: &QuadParams, dt: f64) -> Result<Self> {
        discretize(&build_continuous(params)?, dt)
    }

    pub fn step(&self, x: &QuadState, u: &QuadInput) -> QuadState {
        QuadState::from_vector(&self.step_vector(&x.to_vector(), &u.to_vector()))
    }

    pub fn step_vector(&self, x: &StateVector, u: &InputVector) -> StateVector {
        self.a * x + self.b * u + self.g
    }

    /// `B†_T = [e_1 e_5]ᵀ B_T [e_1 e_2]`: horizontal displacement per unit
    /// (θ_cmd, φ_cmd) over one step.
    pub fn horizontal_input_gain(&self) -> nalgebra::Matrix2<f64> {
        nalgebra::Matrix2::new(
            self.b[(idx::X, idx::THETA_CMD)],
            self.b[(idx::X, idx::PHI_CMD)],
            self.b[(idx::Y, idx::THETA_CMD)],
            self.b[(idx::Y, idx::PHI_CMD)],
        )
    }

    /// Extract one of the decoupled sub-systems as dense matrices.
    pub fn subsystem(&self, axis: Axis) -> Subsystem {
        let states = axis.states();
        let input = axis.input();
        let n = states.len();
        let a = DMatrix::from_fn(n, n, |i, j| self.a[(states[i], states[j])]);
        let b = DMatrix::from_fn(n, 1, |i, _| self.b[(states[i], input)]);
        let c = DVector::from_fn(n, |i, _| self.g[states[i]]);
        Subsystem { axis, states: states.to_vec(), input, a, b, c }
    }
}

/// The three dynamically decoupled blocks of the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    /// `(x, ẋ, θ, θ̇)` driven by θ_cmd
    XPitch,
    /// `(y, ẏ, φ, φ̇)` driven by φ_cmd
    YRoll,
    /// `(z, ż)` driven by T_z
    Altitude,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::XPitch, Axis::YRoll, Axis::Altitude];

    pub fn states(self) -> &'static [usize] {
        match self {
            Axis::XPitch => &[idx::X, idx::X_DOT, idx::THETA, idx::THETA_DOT],
            Axis::YRoll => &[idx::Y, idx::Y_DOT, idx::PHI, idx::PHI_DOT],
            Axis::Altitude => &[idx::Z, idx::Z_DOT],
        }
    }

    pub fn input(self) -> usize {
        match self {
            Axis::XPitch => idx::THETA_CMD,
            Axis::YRoll => idx::PHI_CMD,
            Axis::Altitude => idx::THRUST,
        }
    }
}

/// `x⁺ = A x + B u + c` restricted to one [`Axis`].
#[derive(Clone, Debug)]
pub struct Subsystem {
    pub axis: Axis,
    pub states: Vec<usize>,
    pub input: usize,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
}

/// Rank of `[B AB A²B A³B]` for a horizontal sub-system of the continuous model.
pub fn controllability_rank(model: &ContinuousModel, axis: Axis) -> usize {
    let states = axis.states();
    let n = states.len();
    let a = DMatrix::from_fn(n, n, |i, j| model.a[(states[i], states[j])]);
    let b = DVector::from_fn(n, |i, _| model.b[(states[i], axis.input())]);
    let mut ctrb = DMatrix::<f64>::zeros(n, n);
    let mut col = b;
    for k in 0..n {
        let norm = col.norm();
        if norm > 0.0 {
            ctrb.set_column(k, &(&col / norm));
        }
        col = &a * &col;
    }
    ctrb.rank(1e-9)
}

/// Write a matrix as CSV, one row per line.
pub fn write_matrix_csv<W, R, C, S>(mut out: W, m: &nalgebra::Matrix<f64, R, C, S>) -> std::io::Result<()>
where
    W: std::io::Write,
    R: nalgebra::Dim,
    C: nalgebra::Dim,
    S: nalgebra::RawStorage<f64, R, C>,
{
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
