//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::f64::consts::{PI, TAU};
use std::process::ExitCode;
use std::time::Instant;

use chase_core::config::RunConfig;
use chase_core::dynamics::{DiscreteModel, QuadInput, QuadParams, QuadState};
use chase_core::evader::{ground_velocity, vehicle_step, VehicleState};
use chase_core::mpc::Controller;
use chase_core::prediction::{chebyshev_center, PredictionSector};
use chase_core::qp::{QpSolver, QpStatus};
use chase_core::reference::{fit_min_jerk, Boundary, QuinticSegment};
use chase_core::sim::{error_outside_events, run_scenario, TrackingMetrics, EVENT_WINDOW, SETTLE_TIME};
use chase_core::terminal::build_bf;
use chase_core::verify::{feasibility_suite, invariance_suite, sector_suite};
use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 1;

struct Outcome {
    pass: bool,
    detail: String,
}

type Criterion = fn() -> chase_core::Result<Outcome>;

fn main() -> ExitCode {
    let criteria: [(&str, Criterion); 10] = [
        ("sim1_circular_steady_state", sim1),
        ("sim2_random_outside_turns", sim2),
        ("recursive_feasibility", recursive_feasibility),
        ("prediction_ball_containment", ball_containment),
        ("terminal_set_invariance", terminal_invariance),
        ("sector_geometry_and_inradius", sector_geometry),
        ("discretization_exactness", discretization),
        ("qp_oracle_equivalence", qp_oracle),
        ("min_jerk", min_jerk),
        ("noise_and_delay_degradation", non_ideality),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let outcome = run().unwrap_or_else(|e| Outcome { pass: false, detail: format!("error: {e}") });
        let secs = start.elapsed().as_secs_f64();
        failed += !outcome.pass as usize;
        println!("{} {name} ({secs:.1} s): {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn sim1() -> chase_core::Result<Outcome> {
    let cfg = RunConfig::default_config();
    let s = &cfg.scenarios.sim1;
    assert_eq!((s.duration, s.dt), (60.0, 0.05));
    let start = Instant::now();
    let mut controller = Controller::new(cfg.controller_config()?)?;
    let log = run_scenario(s, &mut controller)?;
    let secs = start.elapsed().as_secs_f64();
    let m = TrackingMetrics::from_log(&log, 0.25)?;
    Ok(Outcome {
        pass: m.steady_state <= 0.25 && secs < 60.0,
        detail: format!("steady state {:.4} m (limit 0.25), run {secs:.1} s (limit 60)", m.steady_state),
    })
}

fn sim2() -> chase_core::Result<Outcome> {
    let cfg = RunConfig::default_config();
    let start = Instant::now();
    let mut controller = Controller::new(cfg.controller_config()?)?;
    let mut worst: f64 = 0.0;
    let mut missing = 0;
    let mut per_seed = Vec::new();
    for seed in 1..=10 {
        let scenario = chase_core::sim::ScenarioConfig { seed, ..cfg.scenarios.sim2.clone() };
        let log = run_scenario(&scenario, &mut controller)?;
        match error_outside_events(&log, EVENT_WINDOW, SETTLE_TIME) {
            Some(e) => {
                worst = worst.max(e);
                per_seed.push(format!("{e:.3}"));
            }
            None => missing += 1,
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(Outcome {
        pass: missing == 0 && worst <= 0.30 && secs < 300.0,
        detail: format!(
            "worst {worst:.4} m over 10 seeds (limit 0.30) [{}], all seeds {secs:.1} s (limit 300)",
            per_seed.join(", ")
        ),
    })
}

fn recursive_feasibility() -> chase_core::Result<Outcome> {
    let cfg = RunConfig::default_config();
    let report = feasibility_suite(&cfg, 100, cfg.verify.closed_loop_steps, SEED)?;
    Ok(Outcome {
        pass: report.passed() && cfg.verify.slack_tol <= 1e-6,
        detail: format!(
            "{} of {} runs x {} steps failed, worst slack {:.2e} (limit {:.0e})",
            report.failures.len(),
            report.runs,
            report.steps,
            report.worst_slack,
            cfg.verify.slack_tol
        ),
    })
}

/// Admissible rollouts three horizons long; every window of `N` steps must
/// stay in the ball around the window's first position.
fn ball_containment() -> chase_core::Result<Outcome> {
    let cfg = RunConfig::default_config();
    let p = cfg.priors;
    let (n, dt) = (cfg.mpc.horizon, cfg.mpc.dt);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let mut s = VehicleState { heading: rng.gen_range(-PI..PI), ..Default::default() };
        let mut path = vec![s.position()];
        // some rollouts drive straight at the cap and reach the boundary
        let straight = rng.gen_bool(0.1);
        for _ in 0..3 * n {
            let (speed, slip, turn) = if straight {
                (p.v_max, 0.0, 0.0)
            } else {
                let speed = if rng.gen_bool(0.4) { p.v_max } else { rng.gen_range(0.0..=p.v_max) };
                let slip = match rng.gen_range(0..3) {
                    0 => p.theta_lo,
                    1 => p.theta_hi,
                    _ => rng.gen_range(p.theta_lo..=p.theta_hi),
                };
                (speed, slip, rng.gen_range(-0.5..0.5))
            };
            let heading = s.heading + turn;
            let u = ground_velocity(heading, &Vector2::new(speed * slip.sin(), speed * slip.cos()));
            s = vehicle_step(&VehicleState { heading, ..s }, &u, dt);
            path.push(s.position());
        }
        let mut bad = false;
        for k in 0..=2 * n {
            let ball = build_bf(path[k], p.v_max, n, dt)?;
            for q in &path[k + 1..=k + n] {
                worst = worst.max((q - ball.center).norm() / ball.radius);
                bad |= !ball.contains(q, 1e-12);
            }
        }
        violations += bad as usize;
    }
    Ok(Outcome {
        pass: violations == 0,
        detail: format!("{violations} of 1000 rollouts left the ball, worst distance/radius {worst:.6}"),
    })
}

fn terminal_invariance() -> chase_core::Result<Outcome> {
    let cfg = RunConfig::default_config();
    let r = invariance_suite(&cfg, 1000, SEED)?;
    let c = &r.conditions;
    Ok(Outcome {
        pass: r.passed(),
        detail: format!(
            "conditions {}/{}/{}, {} of {} successors outside (controller errors {})",
            c.condition1, c.condition2, c.condition3, r.violations, r.samples, r.controller_errors
        ),
    })
}

fn sector_geometry() -> chase_core::Result<Outcome> {
    let report = sector_suite(1000, SEED)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0xc0ffee);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let lo = rng.gen_range(-PI..PI);
        let sector = PredictionSector {
            center: Vector2::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)),
            radius: rng.gen_range(0.01..2.0),
            theta_lo: lo,
            theta_hi: lo + rng.gen_range(0.01..TAU * 0.999),
        };
        let lp = chebyshev_center(&sector)?;
        worst = worst.max((lp.inradius - grid_inradius(&sector)).abs());
    }
    Ok(Outcome {
        pass: report.passed() && worst <= 1e-3,
        detail: format!(
            "convexity failures {}, centers outside {}, outside ball {}; worst inradius gap to grid {worst:.2e} (limit 1e-3)",
            report.convexity_failures, report.center_outside, report.outside_ball
        ),
    })
}

/// Sector with opening `[lo, hi]` (compass bearings) closed by the chord
/// between its arc ends when wider than a half turn.
struct SectorGeometry {
    c: Vector2<f64>,
    r: f64,
    lo: f64,
    span: f64,
    a: Vector2<f64>,
    b: Vector2<f64>,
}

impl SectorGeometry {
    fn new(s: &PredictionSector) -> Self {
        let dir = |t: f64| Vector2::new(t.sin(), t.cos());
        let span = s.theta_hi - s.theta_lo;
        Self {
            c: s.center,
            r: s.radius,
            lo: s.theta_lo,
            span,
            a: s.center + s.radius * dir(s.theta_lo),
            b: s.center + s.radius * dir(s.theta_hi),
        }
    }

    fn in_opening(&self, d: &Vector2<f64>) -> bool {
        (d.x.atan2(d.y) - self.lo).rem_euclid(TAU) <= self.span
    }

    fn contains(&self, p: &Vector2<f64>) -> bool {
        let d = p - self.c;
        if d.norm() > self.r {
            return false;
        }
        if self.in_opening(&d) {
            return true;
        }
        // the mouth of a wide sector, cut off by the chord
        self.span > PI && side(&self.a, &self.b, p) * side(&self.a, &self.b, &self.c) >= 0.0
    }

    /// Distance from an interior point to the boundary.
    fn depth(&self, p: &Vector2<f64>) -> f64 {
        let d = p - self.c;
        let arc = if self.in_opening(&d) { self.r - d.norm() } else { (p - self.a).norm().min((p - self.b).norm()) };
        let sides = if self.span > PI {
            segment_distance(p, &self.a, &self.b)
        } else {
            segment_distance(p, &self.c, &self.a).min(segment_distance(p, &self.c, &self.b))
        };
        arc.min(sides)
    }
}

fn side(a: &Vector2<f64>, b: &Vector2<f64>, p: &Vector2<f64>) -> f64 {
    (b - a).perp(&(p - a))
}

fn segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + t * ab)).norm()
}

/// Largest inscribed radius by repeated grid refinement in a frame along
/// the bisector. The depth of a convex set is concave, so zooming on the
/// best node converges.
fn grid_inradius(s: &PredictionSector) -> f64 {
    let g = SectorGeometry::new(s);
    const NODES: i32 = 60;
    let mid = g.lo + 0.5 * g.span;
    let eu = Vector2::new(mid.sin(), mid.cos());
    let ev = Vector2::new(eu.y, -eu.x);
    let (mut cu, mut cv) = (0.0, 0.0);
    let mut half_u = g.r;
    let mut half_v = g.r * (0.5 * g.span).min(PI / 2.0).sin();
    let mut best = 0.0;
    while half_u.max(half_v) > 1e-7 {
        let (hu, hv) = (2.0 * half_u / NODES as f64, 2.0 * half_v / NODES as f64);
        let mut best_node = (cu, cv);
        for i in 0..=NODES {
            for j in 0..=NODES {
                let (u, v) = (cu - half_u + i as f64 * hu, cv - half_v + j as f64 * hv);
                let p = g.c + u * eu + v * ev;
                if g.contains(&p) {
                    let depth = g.depth(&p);
                    if depth > best {
                        best = depth;
                        best_node = (u, v);
                    }
                }
            }
        }
        (cu, cv) = best_node;
        half_u *= 0.5;
        half_v *= 0.5;
    }
    best
}

/// Right-hand side of the linearized quadcopter, written out per channel.
fn quad_rhs(p: &QuadParams, x: &[f64; 10], u: &QuadInput) -> [f64; 10] {
    let [_, xd, th, thd, _, yd, ph, phd, _, zd] = *x;
    [
        xd,
        p.gravity * th,
        thd,
        -p.b_p0 * th - p.b_p1 * thd - p.a_p * u.theta_cmd,
        yd,
        -p.gravity * ph,
        phd,
        -p.b_r0 * ph - p.b_r1 * phd - p.a_r * u.phi_cmd,
        zd,
        u.thrust / p.mass - p.gravity,
    ]
}

fn rk4(p: &QuadParams, x0: [f64; 10], u: &QuadInput, dt: f64, substeps: usize) -> [f64; 10] {
    let h = dt / substeps as f64;
    let add = |a: &[f64; 10], b: &[f64; 10], s: f64| std::array::from_fn::<f64, 10, _>(|i| a[i] + s * b[i]);
    let mut x = x0;
    for _ in 0..substeps {
        let k1 = quad_rhs(p, &x, u);
        let k2 = quad_rhs(p, &add(&x, &k1, h / 2.0), u);
        let k3 = quad_rhs(p, &add(&x, &k2, h / 2.0), u);
        let k4 = quad_rhs(p, &add(&x, &k3, h), u);
        x = std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]));
    }
    x
}

fn discretization() -> chase_core::Result<Outcome> {
    let cfg = RunConfig::default_config();
    let model = DiscreteModel::from_params(&cfg.quad, cfg.mpc.dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let scales = [3.0, 2.0, 0.35, 4.0, 3.0, 2.0, 0.35, 4.0, 3.0, 1.5];
        let x: [f64; 10] = std::array::from_fn(|i| rng.gen_range(-scales[i]..=scales[i]));
        let u = QuadInput {
            theta_cmd: rng.gen_range(-0.5..=0.5),
            phi_cmd: rng.gen_range(-0.5..=0.5),
            thrust: rng.gen_range(0.0..=9.81),
        };
        let oracle = rk4(&cfg.quad, x, &u, cfg.mpc.dt, 2000);
        let state = QuadState::from_vector(&nalgebra::SVector::<f64, 10>::from_column_slice(&x));
        let stepped = model.step(&state, &u).to_vector();
        for i in 0..10 {
            worst = worst.max((stepped[i] - oracle[i]).abs());
        }
    }
    Ok(Outcome { pass: worst <= 1e-8, detail: format!("worst deviation {worst:.2e} over 100 pairs (limit 1e-8)") })
}

/// Exact small-QP solution by trying every active set.
fn qp_by_enumeration(h: &DMatrix<f64>, f: &DVector<f64>, c: &DMatrix<f64>, d: &DVector<f64>) -> Option<f64> {
    let (n, m) = (h.nrows(), c.nrows());
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << m) {
        let active: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        if active.len() > n {
            continue;
        }
        let k = active.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(h);
        for (j, &i) in active.iter().enumerate() {
            for col in 0..n {
                kkt[(n + j, col)] = c[(i, col)];
                kkt[(col, n + j)] = c[(i, col)];
            }
            rhs[n + j] = d[i];
        }
        rhs.rows_mut(0, n).copy_from(&(-f));
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        let x = sol.rows(0, n).into_owned();
        let primal = (c * &x - d).iter().all(|v| *v <= 1e-9);
        let dual = sol.rows(n, k).iter().all(|l| *l >= -1e-9);
        if primal && dual {
            let value = 0.5 * x.dot(&(h * &x)) + f.dot(&x);
            best = Some(best.map_or(value, |b: f64| b.min(value)));
        }
    }
    best
}

fn qp_oracle() -> chase_core::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    let mut nondeterministic = 0;
    let mut unsolved = 0;
    for _ in 0..100 {
        let n = rng.gen_range(2..=6);
        let m = rng.gen_range(2..=10);
        let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let h = a.transpose() * &a + DMatrix::identity(n, n) * 0.1;
        let f = DVector::from_fn(n, |_, _| rng.gen_range(-5.0..5.0));
        let c = DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0));
        let x0 = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        let d = &c * &x0 + DVector::from_fn(m, |_, _| rng.gen_range(0.0..1.0));
        let first = QpSolver::new(h.clone())?.solve(&f, &c, &d, &[])?;
        let second = QpSolver::new(h.clone())?.solve(&f, &c, &d, &[])?;
        let same = first.value.to_bits() == second.value.to_bits()
            && first.x.iter().zip(second.x.iter()).all(|(p, q)| p.to_bits() == q.to_bits());
        nondeterministic += !same as usize;
        match (first.status, qp_by_enumeration(&h, &f, &c, &d)) {
            (QpStatus::Optimal, Some(reference)) => worst = worst.max((first.value - reference).abs()),
            _ => unsolved += 1,
        }
    }
    Ok(Outcome {
        pass: worst <= 1e-6 && nondeterministic == 0 && unsolved == 0,
        detail: format!(
            "worst objective gap {worst:.2e} (limit 1e-6), {unsolved} unsolved, {nondeterministic} reruns differing"
        ),
    })
}

fn boundary_error(seg: &QuinticSegment, start: &Boundary, end: &Boundary) -> f64 {
    let (s0, s1) = (seg.eval(0.0), seg.eval(seg.duration));
    [s0.pos - start.pos, s0.vel - start.vel, s0.acc - start.acc, s1.pos - end.pos, s1.vel - end.vel, s1.acc - end.acc]
        .iter()
        .map(|v| v.amax())
        .fold(0.0, f64::max)
}

/// `∫‖jerk‖²` by composite Simpson.
fn jerk_cost(duration: f64, jerk: impl Fn(f64) -> Vector3<f64>) -> f64 {
    let intervals = 2000;
    let h = duration / intervals as f64;
    let mut sum = 0.0;
    for i in 0..=intervals {
        let w = if i == 0 || i == intervals { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        sum += w * jerk(i as f64 * h).norm_squared();
    }
    sum * h / 3.0
}

/// Third derivative in `τ` of the septic `τ³(1−τ)³(a₀ + a₁τ)`, which
/// vanishes with its first two derivatives at both ends.
fn bump_jerk(a: &[f64; 2], tau: f64) -> f64 {
    // monomial coefficients of the degree-7 polynomial
    let base = [0.0, 0.0, 0.0, 1.0, -3.0, 3.0, -1.0];
    let mut poly = [0.0; 8];
    for (i, b) in base.iter().enumerate() {
        for (j, aj) in a.iter().enumerate() {
            poly[i + j] += b * aj;
        }
    }
    (3..8).map(|k| (k * (k - 1) * (k - 2)) as f64 * poly[k] * tau.powi(k as i32 - 3)).sum()
}

fn min_jerk() -> chase_core::Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut rv = |s: f64| Vector3::new(rng.gen_range(-s..s), rng.gen_range(-s..s), rng.gen_range(-s..s));
    let mut bc_worst: f64 = 0.0;
    let mut segments = Vec::new();
    for _ in 0..100 {
        let start = Boundary { pos: rv(3.0), vel: rv(1.0), acc: rv(2.0) };
        let end = Boundary { pos: rv(3.0), vel: rv(1.0), acc: rv(2.0) };
        let duration = 0.5 + rv(1.0).x.abs() * 2.5;
        let seg = fit_min_jerk(&start, &end, duration)?;
        bc_worst = bc_worst.max(boundary_error(&seg, &start, &end));
        segments.push(seg);
    }

    let dp = Vector3::new(1.0, -2.0, 0.5);
    let t_total = 2.0;
    let rest = fit_min_jerk(&Boundary::default(), &Boundary { pos: dp, ..Default::default() }, t_total)?;
    let mut canon_worst: f64 = 0.0;
    for i in 0..=200 {
        let tau = i as f64 / 200.0;
        let shape = 10.0 * tau.powi(3) - 15.0 * tau.powi(4) + 6.0 * tau.powi(5);
        canon_worst = canon_worst.max((rest.eval(tau * t_total).pos - dp * shape).amax());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x1e4);
    let mut beaten = 0;
    let mut trials = 0;
    for seg in segments.iter().take(20) {
        let t = seg.duration;
        let optimum = jerk_cost(t, |s| seg.eval(s).jerk);
        for _ in 0..50 {
            let coeffs: [[f64; 2]; 3] = std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0)));
            let eps = rng.gen_range(0.01..1.0);
            let perturbed = jerk_cost(t, |s| {
                let bump = Vector3::from_fn(|axis, _| bump_jerk(&coeffs[axis], s / t) / t.powi(3));
                seg.eval(s).jerk + eps * bump
            });
            trials += 1;
            beaten += (perturbed < optimum) as usize;
        }
    }
    Ok(Outcome {
        pass: bc_worst <= 1e-9 && canon_worst <= 1e-9 && beaten == 0,
        detail: format!(
            "boundary error {bc_worst:.2e}, canonical quintic error {canon_worst:.2e} (limits 1e-9), {beaten} of {trials} perturbations cheaper"
        ),
    })
}

fn non_ideality() -> chase_core::Result<Outcome> {
    let cfg = RunConfig::default_config();
    let mut controller = Controller::new(cfg.controller_config()?)?;
    let sigmas = [0.0, 0.01, 0.02, 0.05];
    let mut table = Vec::new();
    for delay in [0usize, 2] {
        let mut row = Vec::new();
        for sigma in sigmas {
            let scenario = chase_core::sim::ScenarioConfig { noise_std: sigma, delay_steps: delay, ..cfg.scenarios.sim1.clone() };
            let log = run_scenario(&scenario, &mut controller)?;
            row.push(TrackingMetrics::from_log(&log, 0.25)?.steady_state);
        }
        table.push(row);
    }
    let clean = table[0][0];
    let degraded = table[1][2];
    let monotone = table.iter().all(|row| row.windows(2).all(|w| w[1] >= w[0]));
    let fmt = |row: &Vec<f64>| row.iter().map(|e| format!("{e:.4}")).collect::<Vec<_>>().join("/");
    Ok(Outcome {
        pass: degraded > clean && monotone,
        detail: format!(
            "clean {clean:.4} m, noise 0.02 with delay 2 {degraded:.4} m; by noise {:?}: delay 0 {}, delay 2 {}",
            sigmas,
            fmt(&table[0]),
            fmt(&table[1])
        ),
    })
}
