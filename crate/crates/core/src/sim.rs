//! Closed-loop scenario engine: plant, evader models, measurement noise,
//! actuation delay, logs and tracking metrics.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{QuadInput, QuadState, StateVector};
use crate::error::{Error, Result};
use crate::evader::{bearing, bearing_vector, wrap_angle, EvaderSample, VehicleState};
use crate::mpc::{Controller, Diagnostics, SolveStatus};

/// RNG stream ids, so evader motion does not depend on the noise level.
const STREAM_EVADER: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EvaderSpec {
    /// Counter-clockwise circle starting at angle 0 from the center.
    Circular { radius: f64, speed: f64, center: [f64; 2] },
    /// Bounded random drive inside the square `[−w, w]²`.
    RandomWalk {
        speed_cap: f64,
        #[serde(default = "default_speed_min")]
        speed_min: f64,
        /// Bound on the random longitudinal acceleration (m/s²).
        #[serde(default = "default_accel_cap")]
        accel_cap: f64,
        heading_rate_cap: f64,
        arena_half_width: f64,
        /// Mean rate (1/s) of U-turns, driven at the heading-rate cap.
        #[serde(default = "default_reversal_rate")]
        reversal_rate: f64,
        /// Largest slip magnitude the walk produces (rad).
        #[serde(default)]
        slip_max: f64,
    },
    /// Parked vehicle.
    Stationary { x: f64, y: f64, heading: f64 },
    /// Recorded samples, played back by step index.
    Scripted { samples: Vec<EvaderSample> },
    /// Speed and heading-rate commands supplied from outside each step.
    External { x: f64, y: f64, heading: f64, speed_cap: f64, heading_rate_cap: f64 },
}

fn default_speed_min() -> f64 {
    0.3
}

fn default_accel_cap() -> f64 {
    0.5
}

fn default_reversal_rate() -> f64 {
    0.05
}

/// Steering command for an [`EvaderSpec::External`] vehicle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Steer {
    pub speed: f64,
    pub heading_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    /// Random U-turn.
    Reversal,
    /// Turn back toward the arena center near a wall.
    WallTurn,
    /// Bounce off the arena wall.
    Reflection,
}

/// Turn in progress at the heading-rate cap.
#[derive(Clone, Copy, Debug)]
struct Maneuver {
    kind: EventKind,
    start: f64,
    sign: f64,
    remaining: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaderEvent {
    /// Event time; the midpoint for turns.
    pub t: f64,
    pub kind: EventKind,
}

/// Evader with its internal state.
#[derive(Clone, Debug)]
pub struct Evader {
    spec: EvaderSpec,
    state: VehicleState,
    step: usize,
    speed: f64,
    heading_rate: f64,
    accel: f64,
    slip: f64,
    maneuver: Option<Maneuver>,
    rng: ChaCha8Rng,
}

impl Evader {
    pub fn new(spec: EvaderSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_EVADER);
        let (state, speed) = match &spec {
            EvaderSpec::Circular { radius, speed, center } => {
                if !(*radius > 0.0) || !(*speed >= 0.0) {
                    return Err(Error::InvalidParameter("circular evader needs radius > 0 and speed >= 0".into()));
                }
                (circle_state(*radius, *speed, center, 0.0), *speed)
            }
            EvaderSpec::RandomWalk {
                speed_cap,
                speed_min,
                accel_cap,
                heading_rate_cap,
                arena_half_width,
                reversal_rate,
                slip_max,
            } => {
                if !(*speed_cap > 0.0)
                    || !(*accel_cap >= 0.0)
                    || !(*speed_min >= 0.0 && speed_min <= speed_cap)
                    || !(*heading_rate_cap >= 0.0)
                    || !(*arena_half_width > 0.0)
                    || !(*reversal_rate >= 0.0)
                    || !(*slip_max >= 0.0)
                {
                    return Err(Error::InvalidParameter("random-walk evader parameters out of range".into()));
                }
                let heading = rng.gen_range(-PI..PI);
                let speed = 0.5 * (speed_min + speed_cap);
                let v = speed * bearing_vector(heading);
                (VehicleState { x: 0.0, y: 0.0, v_x: v.x, v_y: v.y, heading }, speed)
            }
            EvaderSpec::Stationary { x, y, heading } => {
                (VehicleState { x: *x, y: *y, v_x: 0.0, v_y: 0.0, heading: wrap_angle(*heading) }, 0.0)
            }
            EvaderSpec::Scripted { samples } => {
                let first = samples.first().ok_or_else(|| Error::InvalidParameter("empty scripted evader".into()))?;
                (first.state, first.state.speed())
            }
            EvaderSpec::External { x, y, heading, speed_cap, heading_rate_cap } => {
                if !(*speed_cap > 0.0) || !(*heading_rate_cap >= 0.0) {
                    return Err(Error::InvalidParameter("external evader caps out of range".into()));
                }
                (VehicleState { x: *x, y: *y, v_x: 0.0, v_y: 0.0, heading: wrap_angle(*heading) }, 0.0)
            }
        };
        Ok(Self { spec, state, step: 0, speed, heading_rate: 0.0, accel: 0.0, slip: 0.0, maneuver: None, rng })
    }

    pub fn state(&self) -> &VehicleState {
        &self.state
    }

    pub fn spec(&self) -> &EvaderSpec {
        &self.spec
    }

    /// Largest speed the evader can produce.
    pub fn speed_cap(&self) -> f64 {
        match &self.spec {
            EvaderSpec::Circular { speed, .. } => *speed,
            EvaderSpec::RandomWalk { speed_cap, .. } | EvaderSpec::External { speed_cap, .. } => *speed_cap,
            EvaderSpec::Stationary { .. } => 0.0,
            EvaderSpec::Scripted { samples } => samples.iter().map(|s| s.state.speed()).fold(0.0, f64::max),
        }
    }

    /// Clamp a steering request to what an external evader accepts.
    pub fn clamp_steer(&self, steer: Steer) -> Steer {
        match &self.spec {
            EvaderSpec::External { speed_cap, heading_rate_cap, .. } => Steer {
                speed: if steer.speed.is_finite() { steer.speed.clamp(0.0, *speed_cap) } else { 0.0 },
                heading_rate: if steer.heading_rate.is_finite() {
                    steer.heading_rate.clamp(-heading_rate_cap, *heading_rate_cap)
                } else {
                    0.0
                },
            },
            _ => steer,
        }
    }

    /// Advance by `dt`; returns any events that happened during the step.
    pub fn advance(&mut self, dt: f64, steer: Option<Steer>) -> Vec<EvaderEvent> {
        self.step += 1;
        let t = self.step as f64 * dt;
        let mut events = Vec::new();
        match self.spec.clone() {
            EvaderSpec::Circular { radius, speed, center } => {
                self.state = circle_state(radius, speed, &center, t);
            }
            EvaderSpec::Stationary { .. } => {}
            EvaderSpec::Scripted { samples } => {
                let idx = self.step.min(samples.len() - 1);
                self.state = samples[idx].state;
            }
            EvaderSpec::External { .. } => {
                let s = self.clamp_steer(steer.unwrap_or_default());
                let heading = wrap_angle(self.state.heading + s.heading_rate * dt);
                let v = s.speed * bearing_vector(heading);
                self.state = VehicleState {
                    x: self.state.x + dt * v.x,
                    y: self.state.y + dt * v.y,
                    v_x: v.x,
                    v_y: v.y,
                    heading,
                };
            }
            EvaderSpec::RandomWalk {
                speed_cap,
                speed_min,
                accel_cap,
                heading_rate_cap,
                arena_half_width,
                reversal_rate,
                slip_max,
            } => {
                let sq = dt.sqrt();
                let n1: f64 = StandardNormal.sample(&mut self.rng);
                let n2: f64 = StandardNormal.sample(&mut self.rng);
                let n3: f64 = StandardNormal.sample(&mut self.rng);
                self.accel += -self.accel * dt + accel_cap * sq * n1;
                self.accel = self.accel.clamp(-accel_cap, accel_cap);
                self.speed = (self.speed + self.accel * dt).clamp(speed_min, speed_cap);
                self.slip += -2.0 * self.slip * dt + slip_max * sq * n3;
                self.slip = self.slip.clamp(-slip_max, slip_max);

                let pos = self.state.position();
                let heading_now = self.state.heading;
                // room to turn around at full steering before reaching the wall
                let margin = speed_cap / heading_rate_cap.max(1e-9) + 0.25 * arena_half_width;
                let dir = bearing_vector(heading_now);
                let outward = (pos.x.abs() > arena_half_width - margin && pos.x * dir.x > 0.0)
                    || (pos.y.abs() > arena_half_width - margin && pos.y * dir.y > 0.0);
                if outward && matches!(self.maneuver, Some(Maneuver { kind: EventKind::Reversal, .. })) {
                    let m = self.maneuver.take().expect("checked above");
                    events.push(EvaderEvent { t: 0.5 * (m.start + t), kind: m.kind });
                }
                if self.maneuver.is_none() {
                    self.heading_rate += -self.heading_rate * dt + heading_rate_cap * sq * n2;
                    self.heading_rate = self.heading_rate.clamp(-heading_rate_cap, heading_rate_cap);
                    if outward && pos.norm() > 0.0 && heading_rate_cap > 0.0 {
                        let turn = wrap_angle(bearing(&(-pos)) - heading_now);
                        self.maneuver = Some(Maneuver {
                            kind: EventKind::WallTurn,
                            start: t - dt,
                            sign: if turn >= 0.0 { 1.0 } else { -1.0 },
                            remaining: turn.abs(),
                        });
                    } else if heading_rate_cap > 0.0 && self.rng.gen::<f64>() < reversal_rate * dt {
                        let sign = if self.rng.gen::<bool>() { 1.0 } else { -1.0 };
                        self.maneuver = Some(Maneuver { kind: EventKind::Reversal, start: t - dt, sign, remaining: PI });
                    }
                }
                if let Some(m) = self.maneuver.as_mut() {
                    let turn = (heading_rate_cap * dt).min(m.remaining);
                    self.heading_rate = m.sign * turn / dt;
                    m.remaining -= turn;
                    if m.remaining <= 1e-12 {
                        events.push(EvaderEvent { t: 0.5 * (m.start + t), kind: m.kind });
                        self.maneuver = None;
                    }
                }

                let mut heading = heading_now + self.heading_rate * dt;
                let mut v = self.speed * bearing_vector(heading + self.slip);
                let mut x = pos.x + dt * v.x;
                let mut y = pos.y + dt * v.y;
                // last resort; the wall turn normally keeps the car inside
                let mut reflected = false;
                if x.abs() > arena_half_width {
                    x = x.signum() * (2.0 * arena_half_width - x.abs());
                    heading = -heading;
                    reflected = true;
                }
                if y.abs() > arena_half_width {
                    y = y.signum() * (2.0 * arena_half_width - y.abs());
                    heading = PI - heading;
                    reflected = true;
                }
                if reflected {
                    self.slip = -self.slip;
                    self.maneuver = None;
                    v = self.speed * bearing_vector(heading + self.slip);
                    events.push(EvaderEvent { t, kind: EventKind::Reflection });
                }
                self.state = VehicleState { x, y, v_x: v.x, v_y: v.y, heading: wrap_angle(heading) };
            }
        }
        events
    }
}

fn circle_state(radius: f64, speed: f64, center: &[f64; 2], t: f64) -> VehicleState {
    let omega = speed / radius;
    let a = omega * t;
    let v = Vector2::new(-a.sin(), a.cos()) * speed;
    let heading = if speed > 0.0 { bearing(&v) } else { 0.0 };
    VehicleState { x: center[0] + radius * a.cos(), y: center[1] + radius * a.sin(), v_x: v.x, v_y: v.y, heading }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub evader: EvaderSpec,
    pub duration: f64,
    pub dt: f64,
    /// Standard deviation added to every measured channel.
    #[serde(default)]
    pub noise_std: f64,
    /// Steps between a command being computed and applied.
    #[serde(default)]
    pub delay_steps: usize,
    #[serde(default)]
    pub initial_quad: QuadState,
    #[serde(default)]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    pub fn validate(&self, controller_dt: f64) -> Result<()> {
        if !(self.duration > 0.0) || !(self.dt > 0.0) {
            return Err(Error::InvalidParameter("scenario duration and dt must be > 0".into()));
        }
        if (self.dt - controller_dt).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!(
                "scenario dt {} differs from controller dt {controller_dt}",
                self.dt
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidParameter("noise std must be >= 0".into()));
        }
        if !self.initial_quad.is_finite() {
            return Err(Error::InvalidParameter("initial quad state is not finite".into()));
        }
        Ok(())
    }
}

/// Horizontal distance between the quadcopter and the vehicle.
pub fn tracking_error(quad: &QuadState, vehicle: &VehicleState) -> f64 {
    (quad.horizontal() - vehicle.position()).norm()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimRecord {
    pub t: f64,
    pub quad: QuadState,
    pub vehicle: VehicleState,
    pub command: QuadInput,
    pub applied: QuadInput,
    pub diagnostics: Diagnostics,
    pub error: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SimLog {
    pub records: Vec<SimRecord>,
    pub events: Vec<EvaderEvent>,
    /// Steps where the solver did not return an optimal solution.
    pub faults: usize,
}

pub const LOG_HEADER: &str = "t,x,x_dot,theta,theta_dot,y,y_dot,phi,phi_dot,z,z_dot,x_v,y_v,v_x,v_y,heading,\
theta_cmd,phi_cmd,thrust,theta_app,phi_app,thrust_app,error,cost,status,max_slack,est_x,est_y";

pub const SECTOR_HEADER: &str = "t,center_x,center_y,radius,theta_lo,theta_hi,est_x,est_y,inradius,v_bar,delta_lo,delta_hi";

/// Half-width (s) of the window excluded around each evader turn event.
pub const EVENT_WINDOW: f64 = 1.0;
/// Start-up time (s) excluded from the event-window statistic.
pub const SETTLE_TIME: f64 = 10.0;

impl SimLog {
    pub fn errors(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.error).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{LOG_HEADER}")?;
        for r in &self.records {
            let q = r.quad.to_vector();
            let v = &r.vehicle;
            let d = &r.diagnostics;
            let status = match d.status {
                SolveStatus::Optimal => "optimal",
                SolveStatus::Infeasible => "infeasible",
                SolveStatus::MaxIter => "max_iter",
            };
            write!(out, "{}", r.t)?;
            for i in 0..q.len() {
                write!(out, ",{}", q[i])?;
            }
            writeln!(
                out,
                ",{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                v.x,
                v.y,
                v.v_x,
                v.v_y,
                v.heading,
                r.command.theta_cmd,
                r.command.phi_cmd,
                r.command.thrust,
                r.applied.theta_cmd,
                r.applied.phi_cmd,
                r.applied.thrust,
                r.error,
                d.cost,
                status,
                d.max_slack,
                d.estimate.point.x,
                d.estimate.point.y
            )?;
        }
        Ok(())
    }

    /// Per-step prediction sector, point estimate and velocity bounds.
    pub fn write_sectors_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{SECTOR_HEADER}")?;
        for r in &self.records {
            let d = &r.diagnostics;
            let s = &d.sector;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                s.center.x,
                s.center.y,
                s.radius,
                s.theta_lo,
                s.theta_hi,
                d.estimate.point.x,
                d.estimate.point.y,
                d.estimate.inradius,
                d.bounds.v_bar,
                d.bounds.delta_lo,
                d.bounds.delta_hi
            )?;
        }
        Ok(())
    }

    pub fn write_events_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,kind")?;
        for e in &self.events {
            let kind = match e.kind {
                EventKind::Reversal => "reversal",
                EventKind::WallTurn => "wall_turn",
                EventKind::Reflection => "reflection",
            };
            writeln!(out, "{},{kind}", e.t)?;
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    /// Steps `k` where some realized vehicle position over `k..=k+N` leaves
    /// the ball of radius `v_max·N·dt` around the position at `k`.
    pub fn lemma1_violations(&self, v_max: f64, horizon: usize, dt: f64) -> Vec<usize> {
        let radius = v_max * horizon as f64 * dt;
        let n = self.records.len();
        (0..n)
            .filter(|&k| {
                let c = self.records[k].vehicle.position();
                (k..=(k + horizon).min(n - 1))
                    .any(|j| (self.records[j].vehicle.position() - c).norm() > radius * (1.0 + 1e-9) + 1e-12)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    /// Mean error over the final quarter of the run.
    pub steady_state: f64,
    pub peak: f64,
    pub mean: f64,
    pub threshold: f64,
    /// First time the error is at or below `threshold`.
    pub convergence_time: Option<f64>,
}

impl TrackingMetrics {
    pub fn from_series(times: &[f64], errors: &[f64], threshold: f64) -> Result<Self> {
        if errors.is_empty() || times.len() != errors.len() {
            return Err(Error::InvalidParameter("metrics need a non-empty error series".into()));
        }
        let n = errors.len();
        let tail = &errors[n - n.div_ceil(4)..];
        Ok(Self {
            steady_state: tail.iter().sum::<f64>() / tail.len() as f64,
            peak: errors.iter().copied().fold(0.0, f64::max),
            mean: errors.iter().sum::<f64>() / n as f64,
            threshold,
            convergence_time: errors.iter().position(|e| *e <= threshold).map(|i| times[i]),
        })
    }

    pub fn from_log(log: &SimLog, threshold: f64) -> Result<Self> {
        let t: Vec<f64> = log.records.iter().map(|r| r.t).collect();
        Self::from_series(&t, &log.errors(), threshold)
    }
}

/// Largest error outside `±window` seconds of every event and after `settle`.
pub fn error_outside_events(log: &SimLog, window: f64, settle: f64) -> Option<f64> {
    log.records
        .iter()
        .filter(|r| r.t >= settle && log.events.iter().all(|e| (r.t - e.t).abs() > window))
        .map(|r| r.error)
        .fold(None, |acc, e| Some(acc.map_or(e, |a: f64| a.max(e))))
}

/// Deterministic closed loop. The controller is reset first.
pub fn run_scenario(config: &ScenarioConfig, controller: &mut Controller) -> Result<SimLog> {
    let mut sim = Simulation::new(config.clone(), controller)?;
    for _ in 0..config.steps() {
        sim.step(controller, None)?;
    }
    Ok(sim.into_log())
}

/// Step-by-step closed loop: measure, solve, delay, plant step, evader step.
/// Batch runs and live sessions share this so their logs agree byte for byte.
pub struct Simulation {
    config: ScenarioConfig,
    evader: Evader,
    noise_rng: ChaCha8Rng,
    queue: VecDeque<QuadInput>,
    quad: QuadState,
    tick: u64,
    log: SimLog,
}

impl Simulation {
    /// Resets `controller`; the same controller must be passed to every step.
    pub fn new(config: ScenarioConfig, controller: &mut Controller) -> Result<Self> {
        config.validate(controller.config.mpc.dt)?;
        controller.reset()?;
        let evader = Evader::new(config.evader.clone(), config.seed)?;
        let mut noise_rng = ChaCha8Rng::seed_from_u64(config.seed);
        noise_rng.set_stream(STREAM_NOISE);
        let hover = controller.config.quad.hover_input();
        let queue = std::iter::repeat(hover).take(config.delay_steps).collect();
        let quad = config.initial_quad;
        Ok(Self { config, evader, noise_rng, queue, quad, tick: 0, log: SimLog::default() })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    /// Number of completed steps.
    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn time(&self) -> f64 {
        self.tick as f64 * self.config.dt
    }

    pub fn quad(&self) -> &QuadState {
        &self.quad
    }

    pub fn evader(&self) -> &Evader {
        &self.evader
    }

    pub fn log(&self) -> &SimLog {
        &self.log
    }

    pub fn into_log(self) -> SimLog {
        self.log
    }

    /// One closed-loop step. `steer` drives an external evader and is
    /// clamped into its bounds. On a controller error nothing advances.
    pub fn step(&mut self, controller: &mut Controller, steer: Option<Steer>) -> Result<&SimRecord> {
        let t = self.time();
        let vehicle = *self.evader.state();
        let (mq, mv) = measure(&self.quad, &vehicle, self.config.noise_std, &mut self.noise_rng);
        let (command, diagnostics) = controller.step(t, &mq, &mv)?;
        if diagnostics.status != SolveStatus::Optimal {
            self.log.faults += 1;
        }
        self.queue.push_back(command);
        let applied = self.queue.pop_front().expect("queue holds at least the new command");
        let quad = self.quad;
        self.log.records.push(SimRecord {
            t,
            quad,
            vehicle,
            command,
            applied,
            diagnostics,
            error: tracking_error(&quad, &vehicle),
        });
        self.quad = controller.model.step(&quad, &applied);
        let events = self.evader.advance(self.config.dt, steer);
        self.log.events.extend(events);
        self.tick += 1;
        Ok(self.log.records.last().expect("record just pushed"))
    }
}

fn measure(quad: &QuadState, vehicle: &VehicleState, std: f64, rng: &mut ChaCha8Rng) -> (QuadState, VehicleState) {
    if std == 0.0 {
        return (*quad, *vehicle);
    }
    let mut noise = || -> f64 {
        let n: f64 = StandardNormal.sample(rng);
        std * n
    };
    let v = quad.to_vector();
    let noisy = StateVector::from_fn(|i, _| v[i] + noise());
    let mv = VehicleState {
        x: vehicle.x + noise(),
        y: vehicle.y + noise(),
        v_x: vehicle.v_x + noise(),
        v_y: vehicle.v_y + noise(),
        heading: wrap_angle(vehicle.heading + noise()),
    };
    (QuadState::from_vector(&noisy), mv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tracking_error_examples() {
        let v = VehicleState::default();
        assert_eq!(tracking_error(&QuadState::hover_at(0.0, 0.0, 0.5), &v), 0.0);
        assert_eq!(tracking_error(&QuadState::hover_at(1.0, 0.0, 0.5), &v), 1.0);
        assert_eq!(tracking_error(&QuadState::hover_at(3.0, 4.0, 0.0), &v), 5.0);
    }

    #[test]
    fn metrics_over_final_quarter() {
        let t: Vec<f64> = (0..8).map(|k| k as f64).collect();
        let e = [4.0, 3.0, 2.0, 1.0, 0.5, 0.5, 0.2, 0.4];
        let m = TrackingMetrics::from_series(&t, &e, 0.5).unwrap();
        assert!((m.steady_state - 0.3).abs() < 1e-12);
        assert_eq!(m.peak, 4.0);
        assert_eq!(m.convergence_time, Some(4.0));
        assert!(TrackingMetrics::from_series(&[], &[], 0.1).is_err());
    }

    #[test]
    fn circle_stays_on_circle() {
        let mut ev =
            Evader::new(EvaderSpec::Circular { radius: 2.0, speed: 0.5, center: [1.0, -1.0] }, 0).unwrap();
        for _ in 0..200 {
            ev.advance(0.05, None);
            let s = ev.state();
            assert!(((s.position() - Vector2::new(1.0, -1.0)).norm() - 2.0).abs() < 1e-12);
            assert!((s.speed() - 0.5).abs() < 1e-12);
            assert!((bearing(&s.velocity()) - s.heading).abs() < 1e-12);
        }
    }

    fn walk() -> EvaderSpec {
        EvaderSpec::RandomWalk {
            speed_cap: 0.8,
            speed_min: 0.2,
            accel_cap: 0.5,
            heading_rate_cap: 1.0,
            arena_half_width: 3.0,
            reversal_rate: 0.1,
            slip_max: 0.2,
        }
    }

    #[test]
    fn random_walk_is_admissible_and_bounded() {
        let priors = crate::evader::BoundPriors::default();
        let bounds = crate::evader::VelocityBounds::from_priors(priors).unwrap();
        let mut ev = Evader::new(walk(), 42).unwrap();
        let (mut wall_turns, mut reversals, mut reflections) = (0, 0, 0);
        let mut prev_speed = ev.state().speed();
        for _ in 0..20_000 {
            for e in ev.advance(0.05, None) {
                match e.kind {
                    EventKind::WallTurn => wall_turns += 1,
                    EventKind::Reversal => reversals += 1,
                    EventKind::Reflection => reflections += 1,
                }
            }
            let s = *ev.state();
            assert!(s.x.abs() <= 3.0 + 1e-12 && s.y.abs() <= 3.0 + 1e-12);
            assert!(bounds.admits(s.heading, &s.velocity()), "{s:?}");
            assert!((s.speed() - prev_speed).abs() <= 0.5 * 0.05 + 1e-9);
            prev_speed = s.speed();
        }
        assert!(wall_turns > 0 && reversals > 0);
        assert_eq!(reflections, 0);
    }

    #[test]
    fn random_walk_is_seeded() {
        let mut a = Evader::new(walk(), 7).unwrap();
        let mut b = Evader::new(walk(), 7).unwrap();
        let mut c = Evader::new(walk(), 8).unwrap();
        let mut differs = false;
        for _ in 0..100 {
            a.advance(0.05, None);
            b.advance(0.05, None);
            c.advance(0.05, None);
            assert_eq!(a.state(), b.state());
            differs |= a.state() != c.state();
        }
        assert!(differs);
    }

    #[test]
    fn external_steer_is_clamped() {
        let mut ev = Evader::new(
            EvaderSpec::External { x: 0.0, y: 0.0, heading: 0.0, speed_cap: 1.0, heading_rate_cap: 2.0 },
            0,
        )
        .unwrap();
        ev.advance(0.05, Some(Steer { speed: 2.0, heading_rate: 0.0 }));
        assert!((ev.state().speed() - 1.0).abs() < 1e-12);
        assert_eq!(ev.clamp_steer(Steer { speed: -1.0, heading_rate: 9.0 }), Steer { speed: 0.0, heading_rate: 2.0 });
        ev.advance(0.05, None);
        assert_eq!(ev.state().speed(), 0.0);
    }

    #[test]
    fn lemma1_check_flags_teleports() {
        let mk = |x: f64, t: f64| SimRecord {
            t,
            quad: QuadState::default(),
            vehicle: VehicleState { x, ..VehicleState::default() },
            command: QuadInput::default(),
            applied: QuadInput::default(),
            diagnostics: serde_json::from_str(DIAG_FIXTURE).unwrap(),
            error: 0.0,
        };
        let log = SimLog { records: vec![mk(0.0, 0.0), mk(0.05, 0.05), mk(2.0, 0.1)], ..SimLog::default() };
        assert_eq!(log.lemma1_violations(1.0, 2, 0.05), vec![0, 1]);
    }

    const DIAG_FIXTURE: &str = r#"{"t":0.0,"cost":0.0,"status":"optimal","max_slack":0.0,"iterations":0,
        "estimate":{"point":[0.0,0.0],"inradius":0.0},
        "sector":{"center":[0.0,0.0],"radius":0.0,"theta_lo":0.0,"theta_hi":0.0},
        "bounds":{"priors":{"v_max":1.0,"theta_lo":-0.35,"theta_hi":0.35,"beta_v":0.7,"beta_lo":0.7,"beta_hi":0.7},
                  "v_bar":1.0,"delta_lo":-0.35,"delta_hi":0.35},
        "command":{"theta_cmd":0.0,"phi_cmd":0.0,"thrust":0.0},
        "fallback":false,"terminal_in_ball":true,"reference_end":[0.0,0.0,0.5]}"#;

    fn default_run() -> (crate::config::RunConfig, Controller) {
        let cfg = crate::config::RunConfig::default_config();
        let controller = Controller::new(cfg.controller_config().unwrap()).unwrap();
        (cfg, controller)
    }

    #[test]
    fn parked_vehicle_with_quad_on_target_stays_put() {
        let (cfg, mut c) = default_run();
        let scenario = ScenarioConfig {
            evader: EvaderSpec::Stationary { x: 1.0, y: -1.0, heading: 0.3 },
            duration: 10.0,
            initial_quad: QuadState::hover_at(1.0, -1.0, cfg.controller.capture_height),
            ..cfg.scenarios.sim1.clone()
        };
        let log = run_scenario(&scenario, &mut c).unwrap();
        assert_eq!(log.records.len(), 200);
        assert!(log.errors().iter().all(|e| *e <= 1e-3));
    }

    #[test]
    fn same_seed_gives_identical_bytes() {
        let (cfg, mut c) = default_run();
        let scenario = ScenarioConfig { duration: 10.0, noise_std: 0.02, delay_steps: 2, ..cfg.scenarios.sim2.clone() };
        let bytes = |log: &SimLog| {
            let mut v = Vec::new();
            log.write_csv(&mut v).unwrap();
            log.write_json(&mut v).unwrap();
            v
        };
        let first = bytes(&run_scenario(&scenario, &mut c).unwrap());
        let again = bytes(&run_scenario(&scenario, &mut c).unwrap());
        assert!(first == again);
        let other = bytes(&run_scenario(&ScenarioConfig { seed: scenario.seed + 1, ..scenario }, &mut c).unwrap());
        assert!(first != other);
    }

    #[test]
    fn timestamps_are_monotone_and_length_matches() {
        let (cfg, mut c) = default_run();
        let scenario = ScenarioConfig { duration: 5.0, ..cfg.scenarios.sim1.clone() };
        let log = run_scenario(&scenario, &mut c).unwrap();
        assert_eq!(log.records.len(), scenario.steps());
        assert!(log.records.windows(2).all(|w| w[1].t > w[0].t));
    }

    #[test]
    fn half_horizon_delay_at_least_doubles_error() {
        let (cfg, mut c) = default_run();
        let clean = run_scenario(&cfg.scenarios.sim1, &mut c).unwrap();
        let late = ScenarioConfig { delay_steps: cfg.mpc.horizon / 2, ..cfg.scenarios.sim1.clone() };
        let late = run_scenario(&late, &mut c).unwrap();
        let ss = |log: &SimLog| TrackingMetrics::from_log(log, 0.25).unwrap().steady_state;
        assert!(ss(&late) >= 2.0 * ss(&clean), "{} vs {}", ss(&late), ss(&clean));
    }

    #[test]
    fn random_chase_keeps_vehicle_in_prediction_ball() {
        let (cfg, mut c) = default_run();
        let scenario = ScenarioConfig { duration: 30.0, ..cfg.scenarios.sim2.clone() };
        let log = run_scenario(&scenario, &mut c).unwrap();
        assert!(log.lemma1_violations(cfg.priors.v_max, cfg.mpc.horizon, cfg.mpc.dt).is_empty());
    }
}
