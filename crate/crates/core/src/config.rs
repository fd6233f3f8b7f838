//! TOML run configuration: model, controller, constraint boxes, scenarios
//! and verification settings.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{QuadParams, QuadState, NU, NX};
use crate::error::{Error, Result};
use crate::evader::BoundPriors;
use crate::mpc::{ControllerConfig, MpcConfig};
use crate::polytope::Polytope;
use crate::sim::{EvaderSpec, ScenarioConfig};

/// Shipped defaults, identical to `configs/default.toml`.
pub const DEFAULT_TOML: &str = include_str!("../../../configs/default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    /// Evader history window `L`.
    pub history_len: usize,
    /// Capture height `H`.
    pub capture_height: f64,
}

/// Axis-aligned state and input boxes. Infinite entries are allowed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintSection {
    pub state_lo: [f64; NX],
    pub state_hi: [f64; NX],
    pub input_lo: [f64; NU],
    pub input_hi: [f64; NU],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifySection {
    /// Terminal states sampled for the successor check.
    pub terminal_samples: usize,
    /// Starting states drawn from the feasible-start set.
    pub start_samples: usize,
    /// Closed-loop steps per sampled start.
    pub closed_loop_steps: usize,
    /// Allowed slack on a recursively feasible run.
    pub slack_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub noise_std: Vec<f64>,
    pub delay_steps: Vec<usize>,
}

/// Live sessions: a human steers an external evader capped at `v_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeSection {
    pub addr: String,
    /// Evader start `[x, y, heading]`.
    pub start: [f64; 3],
    pub heading_rate_cap: f64,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub delay_steps: usize,
    #[serde(default)]
    pub initial_quad: QuadState,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenarios {
    pub sim1: ScenarioConfig,
    pub sim2: ScenarioConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub quad: QuadParams,
    pub mpc: MpcConfig,
    pub priors: BoundPriors,
    pub controller: ControllerSection,
    pub constraints: ConstraintSection,
    pub scenarios: Scenarios,
    pub verify: VerifySection,
    pub sweep: SweepSection,
    pub bridge: BridgeSection,
}

impl RunConfig {
    pub fn default_config() -> Self {
        Self::from_toml(DEFAULT_TOML).expect("shipped default config parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.quad.validate()?;
        self.mpc.validate()?;
        self.priors.validate()?;
        if self.controller.history_len == 0 {
            return Err(Error::Config("controller.history_len must be >= 1".into()));
        }
        if !(self.controller.capture_height > 0.0) || !self.controller.capture_height.is_finite() {
            return Err(Error::Config("controller.capture_height must be a positive number".into()));
        }
        let c = &self.constraints;
        for (lo, hi, name) in [(&c.state_lo[..], &c.state_hi[..], "state"), (&c.input_lo[..], &c.input_hi[..], "input")] {
            if lo.iter().zip(hi).any(|(l, h)| l.is_nan() || h.is_nan() || l > h) {
                return Err(Error::Config(format!("constraints: {name} box has lo > hi or NaN")));
            }
        }
        for (name, s) in [("sim1", &self.scenarios.sim1), ("sim2", &self.scenarios.sim2)] {
            s.validate(self.mpc.dt).map_err(|e| Error::Config(format!("scenarios.{name}: {e}")))?;
            if let EvaderSpec::RandomWalk { speed_cap, slip_max, .. } = s.evader {
                if speed_cap > self.priors.v_max {
                    return Err(Error::Config(format!(
                        "scenarios.{name}: random-walk speed cap {speed_cap} exceeds v_max {}",
                        self.priors.v_max
                    )));
                }
                if -slip_max < self.priors.theta_lo || slip_max > self.priors.theta_hi {
                    return Err(Error::Config(format!("scenarios.{name}: slip_max outside the slip priors")));
                }
            }
        }
        if self.verify.terminal_samples == 0 || self.verify.start_samples == 0 || self.verify.closed_loop_steps == 0 {
            return Err(Error::Config("verify sample counts must be >= 1".into()));
        }
        self.live_scenario(0).map_err(|e| Error::Config(format!("bridge: {e}")))?;
        if !(self.bridge.heading_rate_cap >= 0.0) || !self.bridge.heading_rate_cap.is_finite() {
            return Err(Error::Config("bridge.heading_rate_cap must be >= 0".into()));
        }
        if self.sweep.noise_std.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::Config("sweep.noise_std entries must be >= 0".into()));
        }
        Ok(())
    }

    pub fn state_polytope(&self) -> Result<Polytope> {
        Polytope::from_box(&self.constraints.state_lo, &self.constraints.state_hi)
    }

    pub fn input_polytope(&self) -> Result<Polytope> {
        Polytope::from_box(&self.constraints.input_lo, &self.constraints.input_hi)
    }

    pub fn controller_config(&self) -> Result<ControllerConfig> {
        Ok(ControllerConfig {
            mpc: self.mpc.clone(),
            quad: self.quad,
            priors: self.priors,
            history_len: self.controller.history_len,
            capture_height: self.controller.capture_height,
            state_polytope: self.state_polytope()?,
            input_polytope: self.input_polytope()?,
        })
    }

    /// Open-ended scenario for a live session with the given seed offset.
    pub fn live_scenario(&self, seed_offset: u64) -> Result<ScenarioConfig> {
        let b = &self.bridge;
        let scenario = ScenarioConfig {
            evader: EvaderSpec::External {
                x: b.start[0],
                y: b.start[1],
                heading: b.start[2],
                speed_cap: self.priors.v_max,
                heading_rate_cap: b.heading_rate_cap,
            },
            duration: f64::INFINITY,
            dt: self.mpc.dt,
            noise_std: b.noise_std,
            delay_steps: b.delay_steps,
            initial_quad: b.initial_quad,
            seed: b.seed.wrapping_add(seed_offset),
        };
        scenario.validate(self.mpc.dt)?;
        Ok(scenario)
    }

    /// Override every scenario seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.scenarios.sim1.seed = seed;
        self.scenarios.sim2.seed = seed;
        self.bridge.seed = seed;
        self
    }
}
