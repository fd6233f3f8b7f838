//! JSON wire messages. Every server frame carries the session tick and a
//! wall-clock timestamp in milliseconds since the Unix epoch.

use chase_core::dynamics::{QuadInput, QuadState};
use chase_core::evader::VehicleState;
use chase_core::mpc::SolveStatus;
use chase_core::prediction::{PointEstimate, PredictionSector};
use chase_core::sim::Steer;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Steer { speed: f64, heading_rate: f64 },
    Pause,
    Resume,
    /// Restart the session; `seed` replaces the scenario seed when given.
    Reset {
        #[serde(default)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    /// Not valid JSON text.
    Malformed,
    /// Missing or unrecognized `type`.
    UnknownType,
    /// Known type with missing, extra or mistyped fields.
    Schema,
    /// The controller failed hard; the session is paused.
    ControllerFault,
    /// Reset rejected, for example because of a bad seed.
    Rejected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Live,
    Paused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub tick: u64,
    pub wall_ms: u64,
    /// Simulation time of the sampled states.
    pub t: f64,
    pub quad: QuadState,
    pub vehicle: VehicleState,
    /// Steering applied to the evader during this tick, after clamping.
    pub steer: Steer,
    pub sector: PredictionSector,
    pub estimate: PointEstimate,
    pub error: f64,
    pub cost: f64,
    pub status: SolveStatus,
    pub max_slack: f64,
    pub command: QuadInput,
    /// The solve did not succeed; the session has paused itself.
    pub fault: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    State(StateFrame),
    Ack {
        tick: u64,
        wall_ms: u64,
        /// First tick that sees the message.
        effect_tick: u64,
        /// Clamped steering for steer messages.
        #[serde(skip_serializing_if = "Option::is_none", default)]
        steer: Option<Steer>,
    },
    Error {
        tick: u64,
        wall_ms: u64,
        code: ErrorCode,
        message: String,
    },
    Notice {
        tick: u64,
        wall_ms: u64,
        message: String,
        /// Messages dropped in the current rate window so far.
        dropped: u64,
    },
    Mode {
        tick: u64,
        wall_ms: u64,
        mode: Mode,
    },
}

impl ServerFrame {
    pub fn tick(&self) -> u64 {
        match self {
            ServerFrame::State(s) => s.tick,
            ServerFrame::Ack { tick, .. }
            | ServerFrame::Error { tick, .. }
            | ServerFrame::Notice { tick, .. }
            | ServerFrame::Mode { tick, .. } => *tick,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frames contain only serializable data")
    }
}

/// Parse a client message, classifying failures for the error frame.
pub fn parse_client(text: &str) -> Result<ClientMessage, (ErrorCode, String)> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| (ErrorCode::Malformed, format!("invalid JSON: {e}")))?;
    match value.get("type").and_then(|t| t.as_str()) {
        Some("steer" | "pause" | "resume" | "reset") => {}
        Some(other) => return Err((ErrorCode::UnknownType, format!("unknown message type {other:?}"))),
        None => return Err((ErrorCode::UnknownType, "message has no string \"type\" field".into())),
    }
    serde_json::from_value(value).map_err(|e| (ErrorCode::Schema, e.to_string()))
}
