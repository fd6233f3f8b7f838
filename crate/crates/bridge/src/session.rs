//! Deterministic session core. The server owns one per live session and is
//! its only writer; time is passed in so the core never reads a clock.

use std::collections::VecDeque;

use chase_core::mpc::{Controller, ControllerConfig, SolveStatus};
use chase_core::sim::{ScenarioConfig, SimLog, Simulation, Steer};
use chase_core::Result;
use serde::{Deserialize, Serialize};

use crate::protocol::{parse_client, ClientMessage, ErrorCode, Mode, ServerFrame, StateFrame};

/// Messages received inside one rolling second at which dropping starts.
pub const RATE_LIMIT: usize = 100;
const RATE_WINDOW: f64 = 1.0;

/// Steering in force from `tick` on.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapeEntry {
    pub tick: u64,
    pub steer: Steer,
}

/// Everything needed to reproduce a session segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub scenario: ScenarioConfig,
    pub ticks: u64,
    pub inputs: Vec<TapeEntry>,
}

/// A closed segment: everything between a start or reset and the next
/// reset or the end of the session.
#[derive(Clone, Debug)]
pub struct Segment {
    pub recording: Recording,
    pub log: SimLog,
}

#[derive(Debug, Default)]
struct RateLimiter {
    arrivals: VecDeque<f64>,
    dropped: u64,
}

impl RateLimiter {
    /// Records an arrival at `now` (seconds) and says whether to keep it.
    fn admit(&mut self, now: f64) -> bool {
        while self.arrivals.front().is_some_and(|t| now - t >= RATE_WINDOW) {
            self.arrivals.pop_front();
        }
        if self.arrivals.is_empty() {
            self.dropped = 0;
        }
        self.arrivals.push_back(now);
        let keep = self.arrivals.len() < RATE_LIMIT;
        if !keep {
            self.dropped += 1;
        }
        keep
    }
}

pub struct Session {
    id: u64,
    scenario: ScenarioConfig,
    controller: Controller,
    sim: Simulation,
    steer: Steer,
    mode: Mode,
    tape: Vec<TapeEntry>,
    rate: RateLimiter,
    closed: Vec<Segment>,
}

impl Session {
    pub fn new(id: u64, scenario: ScenarioConfig, controller: ControllerConfig) -> Result<Self> {
        let mut controller = Controller::new(controller)?;
        let sim = Simulation::new(scenario.clone(), &mut controller)?;
        Ok(Self {
            id,
            scenario,
            controller,
            sim,
            steer: Steer::default(),
            mode: Mode::Live,
            tape: Vec::new(),
            rate: RateLimiter::default(),
            closed: Vec::new(),
        })
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Ticks completed in the current segment.
    pub fn tick(&self) -> u64 {
        self.sim.tick()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn steer(&self) -> Steer {
        self.steer
    }

    pub fn log(&self) -> &SimLog {
        self.sim.log()
    }

    /// Handle one raw client message that arrived at `now` seconds.
    /// Returns the reply frames; mode frames concern every client.
    pub fn accept(&mut self, text: &str, now: f64, wall_ms: u64) -> Vec<ServerFrame> {
        let tick = self.tick();
        if !self.rate.admit(now) {
            if self.rate.dropped == 1 {
                return vec![ServerFrame::Notice {
                    tick,
                    wall_ms,
                    message: format!("rate limit: {RATE_LIMIT} messages per second reached, dropping"),
                    dropped: self.rate.dropped,
                }];
            }
            return Vec::new();
        }
        let msg = match parse_client(text) {
            Ok(m) => m,
            Err((code, message)) => return vec![ServerFrame::Error { tick, wall_ms, code, message }],
        };
        let ack = |steer| ServerFrame::Ack { tick, wall_ms, effect_tick: tick + 1, steer };
        match msg {
            ClientMessage::Steer { speed, heading_rate } => {
                self.steer = self.sim.evader().clamp_steer(Steer { speed, heading_rate });
                vec![ack(Some(self.steer))]
            }
            ClientMessage::Pause => {
                self.mode = Mode::Paused;
                vec![ack(None), ServerFrame::Mode { tick, wall_ms, mode: self.mode }]
            }
            ClientMessage::Resume => {
                self.mode = Mode::Live;
                vec![ack(None), ServerFrame::Mode { tick, wall_ms, mode: self.mode }]
            }
            ClientMessage::Reset { seed } => {
                let mut scenario = self.scenario.clone();
                if let Some(seed) = seed {
                    scenario.seed = seed;
                }
                match Simulation::new(scenario.clone(), &mut self.controller) {
                    Ok(sim) => {
                        let old = std::mem::replace(&mut self.sim, sim);
                        self.close_segment(old);
                        self.scenario = scenario;
                        self.steer = Steer::default();
                        vec![
                            ServerFrame::Ack { tick: 0, wall_ms, effect_tick: 1, steer: None },
                            ServerFrame::Mode { tick: 0, wall_ms, mode: self.mode },
                        ]
                    }
                    Err(e) => vec![ServerFrame::Error { tick, wall_ms, code: ErrorCode::Rejected, message: e.to_string() }],
                }
            }
        }
    }

    /// Run one fixed step when live. Faults pause the session.
    pub fn step(&mut self, wall_ms: u64) -> Option<ServerFrame> {
        if self.mode == Mode::Paused {
            return None;
        }
        let tick = self.tick() + 1;
        if self.tape.last().map_or(true, |e| e.steer != self.steer) {
            self.tape.push(TapeEntry { tick, steer: self.steer });
        }
        let steer = self.steer;
        match self.sim.step(&mut self.controller, Some(steer)) {
            Ok(r) => {
                let d = &r.diagnostics;
                let fault = d.status != SolveStatus::Optimal;
                let frame = StateFrame {
                    tick,
                    wall_ms,
                    t: r.t,
                    quad: r.quad,
                    vehicle: r.vehicle,
                    steer,
                    sector: d.sector,
                    estimate: d.estimate,
                    error: r.error,
                    cost: d.cost,
                    status: d.status,
                    max_slack: d.max_slack,
                    command: r.command,
                    fault,
                };
                if fault {
                    self.mode = Mode::Paused;
                }
                Some(ServerFrame::State(frame))
            }
            Err(e) => {
                self.mode = Mode::Paused;
                Some(ServerFrame::Error { tick, wall_ms, code: ErrorCode::ControllerFault, message: e.to_string() })
            }
        }
    }

    pub fn recording(&self) -> Recording {
        recording_of(&self.scenario, &self.sim, &self.tape)
    }

    /// Segments closed by resets since the last call.
    pub fn take_closed(&mut self) -> Vec<Segment> {
        std::mem::take(&mut self.closed)
    }

    /// Close the session, returning every segment not yet taken.
    pub fn finish(mut self) -> Vec<Segment> {
        let recording = self.recording();
        self.closed.push(Segment { recording, log: self.sim.into_log() });
        self.closed
    }

    fn close_segment(&mut self, old: Simulation) {
        let recording = recording_of(&self.scenario, &old, &self.tape);
        self.tape.clear();
        self.closed.push(Segment { recording, log: old.into_log() });
    }
}

fn recording_of(scenario: &ScenarioConfig, sim: &Simulation, tape: &[TapeEntry]) -> Recording {
    let ticks = sim.tick();
    // live scenarios are open-ended; store the length actually run
    let duration = ticks.max(1) as f64 * scenario.dt;
    Recording { scenario: ScenarioConfig { duration, ..scenario.clone() }, ticks, inputs: tape.to_vec() }
}

/// Re-run a recorded segment without wall-clock involvement.
pub fn replay(recording: &Recording, controller: ControllerConfig) -> Result<SimLog> {
    let mut controller = Controller::new(controller)?;
    let mut sim = Simulation::new(recording.scenario.clone(), &mut controller)?;
    let mut steer = Steer::default();
    let mut inputs = recording.inputs.iter().peekable();
    for tick in 1..=recording.ticks {
        while let Some(e) = inputs.next_if(|e| e.tick <= tick) {
            steer = e.steer;
        }
        sim.step(&mut controller, Some(steer))?;
    }
    Ok(sim.into_log())
}
