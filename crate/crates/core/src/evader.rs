//! Ground vehicle: point-mass kinematics, body-frame velocity recovery and
//! the moving-average update of the velocity bound set.
//!
//! Headings are compass bearings: measured from the +y axis, positive
//! towards +x. A vehicle with heading `φ` and no slip moves along
//! `(sin φ, cos φ)`. The slip angle `δ` is the bearing of the velocity minus
//! the heading, so the body-frame velocity is `‖v‖·(sin δ, cos δ)`.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::{BufRead, Write};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speeds below this are treated as a parked vehicle.
pub const STATIONARY_SPEED: f64 = 1e-3;

/// Wrap an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Compass bearing of a planar vector.
pub fn bearing(v: &Vector2<f64>) -> f64 {
    v.x.atan2(v.y)
}

/// Unit vector along a compass bearing.
pub fn bearing_vector(b: f64) -> Vector2<f64> {
    Vector2::new(b.sin(), b.cos())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    pub v_x: f64,
    pub v_y: f64,
    /// Measured heading, compass bearing in `(-π, π]`.
    pub heading: f64,
}

impl VehicleState {
    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn velocity(&self) -> Vector2<f64> {
        Vector2::new(self.v_x, self.v_y)
    }

    pub fn speed(&self) -> f64 {
        self.v_x.hypot(self.v_y)
    }

    pub fn is_finite(&self) -> bool {
        [self.x, self.y, self.v_x, self.v_y, self.heading].iter().all(|v| v.is_finite())
    }
}

/// Advance the point-mass model by one step under ground velocity `u`.
///
/// The heading follows the velocity while moving and is held while parked.
pub fn vehicle_step(state: &VehicleState, u: &Vector2<f64>, dt: f64) -> VehicleState {
    debug_assert!(dt > 0.0);
    let heading = if u.norm() >= STATIONARY_SPEED { bearing(u) } else { state.heading };
    VehicleState {
        x: state.x + dt * u.x,
        y: state.y + dt * u.y,
        v_x: u.x,
        v_y: u.y,
        heading: wrap_angle(heading),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyVelocity {
    pub speed: f64,
    pub slip: f64,
    /// `(lateral, forward)` components.
    pub body: Vector2<f64>,
    pub stationary: bool,
}

pub fn body_frame_velocity(sample: &VehicleState) -> BodyVelocity {
    let speed = sample.speed();
    if speed < STATIONARY_SPEED {
        return BodyVelocity { speed: 0.0, slip: 0.0, body: Vector2::zeros(), stationary: true };
    }
    // Full-quadrant bearing; arcsin(v_x/‖v‖) only agrees with it for v_y >= 0.
    let slip = wrap_angle(bearing(&sample.velocity()) - sample.heading);
    BodyVelocity { speed, slip, body: speed * Vector2::new(slip.sin(), slip.cos()), stationary: false }
}

/// Rotate a body-frame velocity back into the ground frame.
pub fn ground_velocity(heading: f64, body: &Vector2<f64>) -> Vector2<f64> {
    let (s, c) = heading.sin_cos();
    // body = (lateral, forward); forward is along (sin φ, cos φ), lateral along (cos φ, -sin φ)
    Vector2::new(body.x * c + body.y * s, -body.x * s + body.y * c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundPriors {
    /// `V̄`
    pub v_max: f64,
    /// `Θ̲`
    pub theta_lo: f64,
    /// `Θ̄`
    pub theta_hi: f64,
    pub beta_v: f64,
    pub beta_lo: f64,
    pub beta_hi: f64,
}

impl Default for BoundPriors {
    fn default() -> Self {
        Self { v_max: 1.0, theta_lo: -0.35, theta_hi: 0.35, beta_v: 0.7, beta_lo: 0.7, beta_hi: 0.7 }
    }
}

impl BoundPriors {
    pub fn validate(&self) -> Result<()> {
        if !(self.v_max > 0.0) || !self.v_max.is_finite() {
            return Err(Error::InvalidParameter(format!("v_max must be > 0, got {}", self.v_max)));
        }
        if !(self.theta_lo <= self.theta_hi) {
            return Err(Error::InvalidParameter("theta_lo must be <= theta_hi".into()));
        }
        if self.theta_lo < -PI || self.theta_hi > PI {
            return Err(Error::InvalidParameter("slip priors must lie in [-pi, pi]".into()));
        }
        for (name, b) in [("beta_v", self.beta_v), ("beta_lo", self.beta_lo), ("beta_hi", self.beta_hi)] {
            if !(0.0..=1.0).contains(&b) {
                return Err(Error::InvalidParameter(format!("{name} must be in [0, 1], got {b}")));
            }
        }
        Ok(())
    }
}

/// Prior bounds together with the current data-driven estimates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityBounds {
    pub priors: BoundPriors,
    /// `v̄`
    pub v_bar: f64,
    /// `δ̲`
    pub delta_lo: f64,
    /// `δ̄`
    pub delta_hi: f64,
}

impl VelocityBounds {
    /// Bounds before any data has been seen: the priors themselves.
    pub fn from_priors(priors: BoundPriors) -> Result<Self> {
        priors.validate()?;
        Ok(Self { priors, v_bar: priors.v_max, delta_lo: priors.theta_lo, delta_hi: priors.theta_hi })
    }

    pub fn v_max(&self) -> f64 {
        self.priors.v_max
    }

    /// Whether a ground velocity with the given heading lies in `B_v`.
    pub fn admits(&self, heading: f64, velocity: &Vector2<f64>) -> bool {
        let body = body_frame_velocity(&VehicleState { x: 0.0, y: 0.0, v_x: velocity.x, v_y: velocity.y, heading });
        if body.stationary {
            return true;
        }
        body.speed <= self.priors.v_max * (1.0 + 1e-12)
            && body.slip >= self.priors.theta_lo - 1e-12
            && body.slip <= self.priors.theta_hi + 1e-12
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaderSample {
    pub t: f64,
    pub state: VehicleState,
}

/// Sliding window of the last `L` vehicle measurements.
#[derive(Clone, Debug, PartialEq)]
pub struct EvaderHistory {
    window: VecDeque<EvaderSample>,
    capacity: usize,
}

impl EvaderHistory {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidParameter("history window must hold at least one sample".into()));
        }
        Ok(Self { window: VecDeque::with_capacity(capacity), capacity })
    }

    pub fn push(&mut self, t: f64, state: VehicleState) -> Result<()> {
        if let Some(last) = self.window.back() {
            if !(t > last.t) {
                return Err(Error::NonMonotonicTime { prev: last.t, next: t });
            }
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(EvaderSample { t, state });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn latest(&self) -> Option<&EvaderSample> {
        self.window.back()
    }

    pub fn iter(&self) -> impl Iterator<Item = &EvaderSample> {
        self.window.iter()
    }

    pub fn clear(&mut self) {
        self.window.clear();
    }
}

/// Window means used by the bound update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowStats {
    pub mean_speed: f64,
    /// Circular mean of slip over the moving samples; `None` if all parked.
    pub mean_slip: Option<f64>,
}

pub fn window_stats(history: &EvaderHistory) -> Result<WindowStats> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut speed_sum = 0.0;
    let (mut s, mut c, mut moving) = (0.0, 0.0, 0usize);
    for sample in history.iter() {
        let bv = body_frame_velocity(&sample.state);
        speed_sum += bv.speed;
        if !bv.stationary {
            s += bv.slip.sin();
            c += bv.slip.cos();
            moving += 1;
        }
    }
    let mean_slip = (moving > 0).then(|| if s == 0.0 && c == 0.0 { 0.0 } else { s.atan2(c) });
    Ok(WindowStats { mean_speed: speed_sum / history.len() as f64, mean_slip })
}

/// Blend priors and window means: `v̄ = V̄(1−β_v) + β_v ṽ`, and likewise for
/// the slip bounds.
///
/// With no moving sample in the window the direction of travel is
/// unobservable and the slip bounds open to the full circle.
pub fn update_bounds(bounds: &VelocityBounds, history: &EvaderHistory) -> Result<VelocityBounds> {
    let p = bounds.priors;
    let stats = window_stats(history)?;
    let v_bar = (p.v_max * (1.0 - p.beta_v) + p.beta_v * stats.mean_speed).clamp(0.0, p.v_max);
    let (mut lo, mut hi) = match stats.mean_slip {
        Some(slip) => (
            p.theta_lo * (1.0 - p.beta_lo) + p.beta_lo * slip,
            p.theta_hi * (1.0 - p.beta_hi) + p.beta_hi * slip,
        ),
        None => (-PI, PI),
    };
    if lo > hi {
        std::mem::swap(&mut lo, &mut hi);
    }
    Ok(VelocityBounds { priors: p, v_bar, delta_lo: lo, delta_hi: hi })
}

pub const TELEMETRY_HEADER: &str = "t,x_v,y_v,v_x,v_y,heading";

pub fn write_telemetry<W: Write>(mut out: W, samples: &[EvaderSample]) -> std::io::Result<()> {
    writeln!(out, "{TELEMETRY_HEADER}")?;
    for s in samples {
        let v = &s.state;
        writeln!(out, "{},{},{},{},{},{}", s.t, v.x, v.y, v.v_x, v.v_y, v.heading)?;
    }
    Ok(())
}

pub fn read_telemetry<R: BufRead>(input: R) -> Result<Vec<EvaderSample>> {
    let mut samples = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || (lineno == 0 && line.starts_with('t')) {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("telemetry line {}: {e}", lineno + 1)))?;
        if fields.len() != 6 {
            return Err(Error::Config(format!("telemetry line {}: expected 6 columns", lineno + 1)));
        }
        samples.push(EvaderSample {
            t: fields[0],
            state: VehicleState { x: fields[1], y: fields[2], v_x: fields[3], v_y: fields[4], heading: fields[5] },
        });
    }
    Ok(samples)
}
