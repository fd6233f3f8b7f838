//! Minimum-jerk reference from the quadcopter's state to a point at capture
//! height above the predicted vehicle position.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::dynamics::{QuadParams, QuadState};
use crate::error::{Error, Result};
use crate::prediction::PointEstimate;

/// Reference state at one horizon step.
pub type ReferencePoint = QuadState;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceAngles {
    /// Pitch and roll from the linearized flatness relations `ẍ = gθ`, `ÿ = −gφ`.
    #[default]
    Flat,
    /// Pitch and roll references held at zero.
    Zero,
}

/// Position, velocity and acceleration at one end of a segment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub acc: Vector3<f64>,
}

/// Per-axis quintic `p(t) = Σ c_i t^i` on `[0, duration]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuinticSegment {
    pub coeffs: [[f64; 6]; 3],
    pub duration: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentSample {
    pub pos: Vector3<f64>,
    pub vel: Vector3<f64>,
    pub acc: Vector3<f64>,
    pub jerk: Vector3<f64>,
}

/// Quintic matching position, velocity and acceleration at both ends; this
/// is the minimizer of the integrated squared jerk.
pub fn fit_min_jerk(start: &Boundary, end: &Boundary, duration: f64) -> Result<QuinticSegment> {
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::InvalidParameter(format!("segment duration must be > 0, got {duration}")));
    }
    let t = duration;
    let (t2, t3, t4, t5) = (t * t, t * t * t, t * t * t * t, t * t * t * t * t);
    let mut coeffs = [[0.0; 6]; 3];
    for (axis, c) in coeffs.iter_mut().enumerate() {
        let (p0, v0, a0) = (start.pos[axis], start.vel[axis], start.acc[axis]);
        let (p1, v1, a1) = (end.pos[axis], end.vel[axis], end.acc[axis]);
        let dp = p1 - p0;
        c[0] = p0;
        c[1] = v0;
        c[2] = 0.5 * a0;
        c[3] = (20.0 * dp - (8.0 * v1 + 12.0 * v0) * t - (3.0 * a0 - a1) * t2) / (2.0 * t3);
        c[4] = (-30.0 * dp + (14.0 * v1 + 16.0 * v0) * t + (3.0 * a0 - 2.0 * a1) * t2) / (2.0 * t4);
        c[5] = (12.0 * dp - 6.0 * (v1 + v0) * t - (a0 - a1) * t2) / (2.0 * t5);
    }
    Ok(QuinticSegment { coeffs, duration })
}

impl QuinticSegment {
    pub fn eval(&self, t: f64) -> SegmentSample {
        let mut s = SegmentSample {
            pos: Vector3::zeros(),
            vel: Vector3::zeros(),
            acc: Vector3::zeros(),
            jerk: Vector3::zeros(),
        };
        for (axis, c) in self.coeffs.iter().enumerate() {
            s.pos[axis] = c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
            s.vel[axis] = c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5])));
            s.acc[axis] = 2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5]));
            s.jerk[axis] = 6.0 * c[3] + t * (24.0 * c[4] + t * 60.0 * c[5]);
        }
        s
    }
}

/// Sample `steps + 1` reference states at spacing `dt`.
pub fn sample_reference(
    seg: &QuinticSegment,
    steps: usize,
    dt: f64,
    params: &QuadParams,
    angles: ReferenceAngles,
) -> Result<Vec<ReferencePoint>> {
    let horizon = steps as f64 * dt;
    if horizon > seg.duration + 1e-9 {
        return Err(Error::HorizonExceedsSegment { horizon, segment: seg.duration });
    }
    let g = params.gravity;
    let mut out = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let s = seg.eval(k as f64 * dt);
        let mut r = QuadState {
            x: s.pos.x,
            x_dot: s.vel.x,
            y: s.pos.y,
            y_dot: s.vel.y,
            z: s.pos.z,
            z_dot: s.vel.z,
            ..QuadState::default()
        };
        if angles == ReferenceAngles::Flat && k < steps {
            r.theta = s.acc.x / g;
            r.theta_dot = s.jerk.x / g;
            r.phi = -s.acc.y / g;
            r.phi_dot = -s.jerk.y / g;
        }
        out.push(r);
    }
    Ok(out)
}

/// Reference from `current` to `capture_height` above the estimate, arriving
/// with the vehicle's ground velocity and zero acceleration after
/// `steps·dt` seconds.
#[allow(clippy::too_many_arguments)]
pub fn make_reference(
    current: &QuadState,
    estimate: &PointEstimate,
    vehicle_velocity: &Vector2<f64>,
    capture_height: f64,
    steps: usize,
    dt: f64,
    params: &QuadParams,
    angles: ReferenceAngles,
) -> Result<Vec<ReferencePoint>> {
    if steps == 0 {
        return Err(Error::InvalidParameter("reference needs at least one step".into()));
    }
    let g = params.gravity;
    let start = Boundary {
        pos: Vector3::new(current.x, current.y, current.z),
        vel: Vector3::new(current.x_dot, current.y_dot, current.z_dot),
        acc: Vector3::new(g * current.theta, -g * current.phi, 0.0),
    };
    let end = Boundary {
        pos: Vector3::new(estimate.point.x, estimate.point.y, capture_height),
        vel: Vector3::new(vehicle_velocity.x, vehicle_velocity.y, 0.0),
        acc: Vector3::zeros(),
    };
    let seg = fit_min_jerk(&start, &end, steps as f64 * dt)?;
    sample_reference(&seg, steps, dt, params, angles)
}
