//! Property suites behind the `verify` command: recursive feasibility from
//! the feasible-start set, prediction-ball containment, terminal-set
//! invariance and sector geometry.

use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dynamics::{DiscreteModel, QuadState, NX};
use crate::error::Result;
use crate::evader::{bearing_vector, ground_velocity, vehicle_step, BoundPriors, VehicleState};
use crate::mpc::{Controller, SolveStatus};
use crate::prediction::{chebyshev_center, PredictionSector};
use crate::reach::build_feasible_start_set;
use crate::sim::{run_scenario, ScenarioConfig};
use crate::terminal::{build_bf, build_terminal_set, check_lemma2_conditions, terminal_controller, Lemma2Report, TerminalSet};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeasibilityFailure {
    pub run: usize,
    pub step: usize,
    pub status: SolveStatus,
    pub max_slack: f64,
    pub start: QuadState,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub runs: usize,
    pub steps: usize,
    pub slack_tol: f64,
    pub worst_slack: f64,
    /// Runs with at least one bad step, first bad step each.
    pub failures: Vec<FeasibilityFailure>,
}

impl FeasibilityReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Terminal set around the origin for the configured sets.
pub fn origin_terminal_set(cfg: &RunConfig) -> Result<TerminalSet> {
    build_terminal_set(
        Vector2::zeros(),
        cfg.priors.v_max,
        &cfg.state_polytope()?,
        cfg.mpc.horizon,
        cfg.mpc.dt,
        cfg.controller.capture_height,
    )
}

/// Closed-loop runs from starts drawn in the feasible-start set of a vehicle
/// at the origin, each chased with the configured random evader.
pub fn feasibility_suite(cfg: &RunConfig, runs: usize, steps: usize, seed: u64) -> Result<FeasibilityReport> {
    let model = DiscreteModel::from_params(&cfg.quad, cfg.mpc.dt)?;
    let terminal = origin_terminal_set(cfg)?;
    let starts = build_feasible_start_set(
        &model,
        &terminal,
        &cfg.state_polytope()?,
        &cfg.input_polytope()?,
        cfg.mpc.horizon,
    )?;
    let mut controller = Controller::new(cfg.controller_config()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = cfg.verify.slack_tol;
    let mut report = FeasibilityReport { runs, steps, slack_tol: tol, worst_slack: 0.0, failures: Vec::new() };
    for run in 0..runs {
        let start = starts.sample(&mut rng)?;
        let scenario = ScenarioConfig {
            evader: cfg.scenarios.sim2.evader.clone(),
            duration: steps as f64 * cfg.mpc.dt,
            dt: cfg.mpc.dt,
            noise_std: 0.0,
            delay_steps: 0,
            initial_quad: start,
            seed: rng.gen(),
        };
        let log = run_scenario(&scenario, &mut controller)?;
        for (k, r) in log.records.iter().enumerate() {
            let d = &r.diagnostics;
            report.worst_slack = report.worst_slack.max(d.max_slack);
            if d.status != SolveStatus::Optimal || d.max_slack > tol {
                if report.failures.last().map_or(true, |f| f.run != run) {
                    report.failures.push(FeasibilityFailure {
                        run,
                        step: k,
                        status: d.status,
                        max_slack: d.max_slack,
                        start,
                    });
                }
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BallReport {
    pub rollouts: usize,
    pub violations: usize,
    pub worst_ratio: f64,
}

/// Random admissible evader rollouts of `N` steps: every position must stay
/// in the ball of radius `V̄NΔT` around the start.
pub fn ball_containment_suite(priors: &BoundPriors, rollouts: usize, steps: usize, dt: f64, seed: u64) -> Result<BallReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = BallReport { rollouts, violations: 0, worst_ratio: 0.0 };
    for _ in 0..rollouts {
        let mut s = VehicleState {
            x: rng.gen_range(-5.0..5.0),
            y: rng.gen_range(-5.0..5.0),
            v_x: 0.0,
            v_y: 0.0,
            heading: rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
        };
        let ball = build_bf(s.position(), priors.v_max, steps, dt)?;
        let mut bad = false;
        for _ in 0..steps {
            // extreme speeds and slips are drawn on purpose
            let speed = if rng.gen_bool(0.3) { priors.v_max } else { rng.gen_range(0.0..=priors.v_max) };
            let slip = if rng.gen_bool(0.3) {
                if rng.gen_bool(0.5) { priors.theta_lo } else { priors.theta_hi }
            } else {
                rng.gen_range(priors.theta_lo..=priors.theta_hi)
            };
            let heading = s.heading + rng.gen_range(-1.0..1.0);
            let body = Vector2::new(speed * slip.sin(), speed * slip.cos());
            let u = ground_velocity(heading, &body);
            s = vehicle_step(&VehicleState { heading, ..s }, &u, dt);
            if ball.radius > 0.0 {
                report.worst_ratio = report.worst_ratio.max((s.position() - ball.center).norm() / ball.radius);
            }
            bad |= !ball.contains(&s.position(), 1e-12);
        }
        report.violations += bad as usize;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub conditions: Lemma2Report,
    pub samples: usize,
    pub violations: usize,
    /// Controller errors (empty admissible interval) count as violations.
    pub controller_errors: usize,
    pub witness: Option<QuadState>,
}

impl InvarianceReport {
    pub fn passed(&self) -> bool {
        self.conditions.all_hold() && self.violations == 0
    }
}

/// Sample states in the terminal set around the origin, apply the terminal
/// controller, move the vehicle by at most `V̄ΔT`, and check the successor
/// lies in the terminal set around the new position.
pub fn invariance_suite(cfg: &RunConfig, samples: usize, seed: u64) -> Result<InvarianceReport> {
    let model = DiscreteModel::from_params(&cfg.quad, cfg.mpc.dt)?;
    let x_poly = cfg.state_polytope()?;
    let u_poly = cfg.input_polytope()?;
    let terminal = origin_terminal_set(cfg)?;
    let conditions = check_lemma2_conditions(
        &model,
        &x_poly,
        &u_poly,
        cfg.priors.v_max,
        &terminal,
        cfg.verify.terminal_samples,
        seed,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let hull = terminal.hull_polytope();
    let bbox = hull.bounding_box()?;
    let step = cfg.priors.v_max * cfg.mpc.dt;
    let mut report = InvarianceReport { conditions, samples, violations: 0, controller_errors: 0, witness: None };
    let mut drawn = 0;
    while drawn < samples {
        let v = hull.sample_in_box(&mut rng, &bbox, 100_000)?;
        let x = QuadState::from_vector(&nalgebra::SVector::<f64, NX>::from_column_slice(v.as_slice()));
        if !terminal.contains(&x, 0.0) {
            continue;
        }
        drawn += 1;
        let moved = bearing_vector(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI)) * step * rng.gen::<f64>().sqrt();
        let ok = match terminal_controller(&x, &terminal.ball.center, &model, &u_poly) {
            Ok(tc) => terminal.recentered(terminal.ball.center + moved).contains(&model.step(&x, &tc.input), 1e-9),
            Err(_) => {
                report.controller_errors += 1;
                false
            }
        };
        if !ok {
            report.violations += 1;
            report.witness.get_or_insert(x);
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SectorReport {
    pub sectors: usize,
    pub convexity_failures: usize,
    pub center_outside: usize,
    pub outside_ball: usize,
}

impl SectorReport {
    pub fn passed(&self) -> bool {
        self.convexity_failures == 0 && self.center_outside == 0 && self.outside_ball == 0
    }
}

/// Random sectors: midpoint convexity on sampled member pairs, the
/// Chebyshev center lies in the sector, and the sector lies in its ball.
pub fn sector_suite(sectors: usize, seed: u64) -> Result<SectorReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SectorReport { sectors, convexity_failures: 0, center_outside: 0, outside_ball: 0 };
    for _ in 0..sectors {
        let sector = random_sector(&mut rng);
        let est = chebyshev_center(&sector)?;
        if !sector.contains(&est.point) {
            report.center_outside += 1;
        }
        let r = sector.radius;
        let members: Vec<Vector2<f64>> = (0..400)
            .map(|_| sector.center + Vector2::new(rng.gen_range(-r..=r), rng.gen_range(-r..=r)))
            .filter(|p| sector.contains(p))
            .collect();
        if members.iter().any(|p| (p - sector.center).norm() > r * (1.0 + 1e-12) + 1e-12) {
            report.outside_ball += 1;
        }
        let convex = members.windows(2).all(|w| sector.contains(&(0.5 * (w[0] + w[1]))));
        report.convexity_failures += !convex as usize;
    }
    Ok(report)
}

fn random_sector<R: Rng>(rng: &mut R) -> PredictionSector {
    let lo = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let span = rng.gen_range(0.0..std::f64::consts::PI * 1.999);
    PredictionSector {
        center: Vector2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
        radius: rng.gen_range(0.01..2.0),
        theta_lo: lo,
        theta_hi: lo + span,
    }
}
