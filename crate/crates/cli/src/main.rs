//! `chase`: batch scenario runs, noise/delay sweeps and verification suites.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chase_core::config::RunConfig;
use chase_core::mpc::Controller;
use chase_core::sim::{
    error_outside_events, run_scenario, ScenarioConfig, SimLog, TrackingMetrics, EVENT_WINDOW, SETTLE_TIME,
};
use chase_core::verify::{ball_containment_suite, feasibility_suite, invariance_suite, sector_suite};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use tracing::{info, warn};

/// Steady-state limit for the circular chase (m).
const SIM1_LIMIT: f64 = 0.25;
/// Limit on the error away from turn events for the random chase (m).
const SIM2_LIMIT: f64 = 0.30;
const PROPERTY_SAMPLES: usize = 1000;

#[derive(Parser, Debug)]
#[command(name = "chase", version, about = "Pursuit MPC batch runner")]
struct Cli {
    /// TOML config; the shipped defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, env = "CHASE_OUT", default_value = "out")]
    out: PathBuf,
    /// Seed for every scenario and suite.
    #[arg(long, global = true, env = "CHASE_SEED")]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    suite: Option<Suite>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Run one chase scenario (suite sim1 or sim2).
    Run,
    /// Run the verification suites (feasibility, conditions, or both).
    Verify,
    /// Grid over measurement noise and actuation delay.
    Sweep,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Suite {
    Sim1,
    Sim2,
    Feasibility,
    Conditions,
    Sweep,
}

impl Suite {
    fn name(self) -> &'static str {
        match self {
            Suite::Sim1 => "sim1",
            Suite::Sim2 => "sim2",
            Suite::Feasibility => "feasibility",
            Suite::Conditions => "conditions",
            Suite::Sweep => "sweep",
        }
    }
}

#[derive(Debug)]
enum Failure {
    /// Exit 2.
    Usage(String),
    /// Exit 1.
    Check(String),
}

impl From<chase_core::Error> for Failure {
    fn from(e: chase_core::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(format!("io: {e}"))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Usage(format!("json: {e}"))
    }
}

fn main() -> ExitCode {
    let ansi = std::io::IsTerminal::is_terminal(&std::io::stderr());
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).with_ansi(ansi).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default_config(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let seed = cli.seed.unwrap_or(cfg.scenarios.sim1.seed);
    match cli.command {
        Command::Run => {
            let suite = cli.suite.unwrap_or(Suite::Sim1);
            if !matches!(suite, Suite::Sim1 | Suite::Sim2) {
                return Err(Failure::Usage(format!("run takes --suite sim1 or sim2, not {}", suite.name())));
            }
            cmd_run(&cfg, suite, &cli.out)
        }
        Command::Verify => {
            let suite = cli.suite;
            if matches!(suite, Some(Suite::Sim1 | Suite::Sim2 | Suite::Sweep)) {
                return Err(Failure::Usage("verify takes --suite feasibility or conditions".into()));
            }
            cmd_verify(&cfg, suite, seed, &cli.out)
        }
        Command::Sweep => {
            if cli.suite.is_some_and(|s| s != Suite::Sweep) {
                return Err(Failure::Usage("sweep takes no suite other than sweep".into()));
            }
            cmd_sweep(&cfg, &cli.out)
        }
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_with<F>(path: &Path, f: F) -> Result<(), Failure>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

fn simulate(cfg: &RunConfig, scenario: &ScenarioConfig) -> Result<SimLog, Failure> {
    let mut controller = Controller::new(cfg.controller_config()?)?;
    Ok(run_scenario(scenario, &mut controller)?)
}

#[derive(Serialize)]
struct RunSummary {
    suite: &'static str,
    seed: u64,
    steps: usize,
    metrics: TrackingMetrics,
    /// Largest error away from turn events, after start-up.
    outside_event_peak: Option<f64>,
    event_window: f64,
    settle_time: f64,
    events: usize,
    faults: usize,
    ball_violations: usize,
    limit: f64,
    passed: bool,
}

fn cmd_run(cfg: &RunConfig, suite: Suite, out: &Path) -> Result<(), Failure> {
    let scenario = match suite {
        Suite::Sim1 => &cfg.scenarios.sim1,
        _ => &cfg.scenarios.sim2,
    };
    info!(suite = suite.name(), seed = scenario.seed, "running scenario");
    let log = simulate(cfg, scenario)?;
    let limit = if suite == Suite::Sim1 { SIM1_LIMIT } else { SIM2_LIMIT };
    let metrics = TrackingMetrics::from_log(&log, limit)?;
    let outside = error_outside_events(&log, EVENT_WINDOW, SETTLE_TIME);
    let ball_violations = log.lemma1_violations(cfg.priors.v_max, cfg.mpc.horizon, cfg.mpc.dt).len();
    let within = match suite {
        Suite::Sim1 => metrics.steady_state <= limit,
        _ => outside.is_some_and(|e| e <= limit),
    };
    let summary = RunSummary {
        suite: suite.name(),
        seed: scenario.seed,
        steps: log.records.len(),
        metrics,
        outside_event_peak: outside,
        event_window: EVENT_WINDOW,
        settle_time: SETTLE_TIME,
        events: log.events.len(),
        faults: log.faults,
        ball_violations,
        limit,
        passed: within && log.faults == 0 && ball_violations == 0,
    };

    let dir = out.join(suite.name());
    create_dir(&dir)?;
    write_with(&dir.join("log.csv"), |w| log.write_csv(w))?;
    write_with(&dir.join("sectors.csv"), |w| log.write_sectors_csv(w))?;
    write_with(&dir.join("events.csv"), |w| log.write_events_csv(w))?;
    let mut w = BufWriter::new(File::create(dir.join("log.json"))?);
    log.write_json(&mut w)?;
    std::io::Write::flush(&mut w)?;
    write_json(&dir.join("metrics.json"), &summary)?;

    println!(
        "{} steady_state={:.4} peak={:.4} outside_event_peak={} faults={} limit={} {}",
        suite.name(),
        summary.metrics.steady_state,
        summary.metrics.peak,
        outside.map_or("n/a".to_string(), |e| format!("{e:.4}")),
        summary.faults,
        limit,
        if summary.passed { "PASS" } else { "FAIL" }
    );
    if summary.faults > 0 {
        return Err(Failure::Check(format!("{} controller faults", summary.faults)));
    }
    if !summary.passed {
        return Err(Failure::Check(format!("{} outside its limit", suite.name())));
    }
    Ok(())
}

fn check(name: &str, passed: bool, details: Value) -> Value {
    println!("{} {name}", if passed { "PASS" } else { "FAIL" });
    json!({ "name": name, "passed": passed, "details": details })
}

fn cmd_verify(cfg: &RunConfig, suite: Option<Suite>, seed: u64, out: &Path) -> Result<(), Failure> {
    let mut checks = Vec::new();
    if suite != Some(Suite::Feasibility) {
        info!("terminal-set conditions and invariance");
        let inv = invariance_suite(cfg, PROPERTY_SAMPLES, seed)?;
        if !inv.conditions.all_hold() {
            warn!("terminal-set conditions do not all hold on this config");
        }
        let c = &inv.conditions;
        checks.push(check("condition1_displacement", c.condition1, json!({ "delta_x": c.delta_x, "delta_y": c.delta_y, "required": c.required_step })));
        checks.push(check(
            "condition2_successor",
            c.condition2,
            json!({ "samples": c.condition2_samples, "failures": c.condition2_failures, "witness": c.condition2_witness }),
        ));
        checks.push(check(
            "condition3_input_ball",
            c.condition3,
            json!({ "section_depth": c.section_depth, "chebyshev_radius": c.input_chebyshev_radius, "origin_depth": c.origin_depth }),
        ));
        checks.push(check("terminal_invariance", inv.passed(), serde_json::to_value(&inv)?));
    }
    if suite != Some(Suite::Conditions) {
        info!(runs = cfg.verify.start_samples, steps = cfg.verify.closed_loop_steps, "closed-loop feasibility");
        let feas = feasibility_suite(cfg, cfg.verify.start_samples, cfg.verify.closed_loop_steps, seed)?;
        checks.push(check("recursive_feasibility", feas.passed(), serde_json::to_value(&feas)?));
        let ball = ball_containment_suite(&cfg.priors, PROPERTY_SAMPLES, cfg.mpc.horizon, cfg.mpc.dt, seed)?;
        checks.push(check("prediction_ball", ball.violations == 0, serde_json::to_value(&ball)?));
        let sectors = sector_suite(PROPERTY_SAMPLES, seed)?;
        checks.push(check("sector_geometry", sectors.passed(), serde_json::to_value(&sectors)?));
    }
    let all = checks.iter().all(|c| c["passed"] == Value::Bool(true));
    let dir = out.join("verify");
    create_dir(&dir)?;
    write_json(&dir.join("report.json"), &json!({ "seed": seed, "passed": all, "checks": checks }))?;
    if all {
        Ok(())
    } else {
        let failed: Vec<&str> =
            checks.iter().filter(|c| c["passed"] != Value::Bool(true)).filter_map(|c| c["name"].as_str()).collect();
        Err(Failure::Check(failed.join(", ")))
    }
}

#[derive(Serialize, Clone)]
struct SweepRow {
    noise_std: f64,
    delay_steps: usize,
    steady_state: f64,
    peak: f64,
    mean: f64,
    faults: usize,
}

fn cmd_sweep(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let base = &cfg.scenarios.sim1;
    let grid: Vec<(f64, usize)> = cfg
        .sweep
        .delay_steps
        .iter()
        .flat_map(|&d| cfg.sweep.noise_std.iter().map(move |&s| (s, d)))
        .collect();
    info!(cells = grid.len(), "sweep");
    let rows: Vec<Result<SweepRow, Failure>> = std::thread::scope(|scope| {
        let handles: Vec<_> = grid
            .iter()
            .map(|&(noise_std, delay_steps)| {
                scope.spawn(move || {
                    let scenario = ScenarioConfig { noise_std, delay_steps, ..base.clone() };
                    let log = simulate(cfg, &scenario)?;
                    let m = TrackingMetrics::from_log(&log, SIM1_LIMIT)?;
                    Ok(SweepRow { noise_std, delay_steps, steady_state: m.steady_state, peak: m.peak, mean: m.mean, faults: log.faults })
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("sweep worker panicked")).collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;

    // per delay, steady-state error must not decrease as noise grows
    let mut trends = Vec::new();
    for &d in &cfg.sweep.delay_steps {
        let mut col: Vec<&SweepRow> = rows.iter().filter(|r| r.delay_steps == d).collect();
        col.sort_by(|a, b| a.noise_std.total_cmp(&b.noise_std));
        let monotone = col.windows(2).all(|w| w[1].steady_state >= w[0].steady_state);
        trends.push(json!({ "delay_steps": d, "monotone_in_noise": monotone }));
    }
    let monotone = trends.iter().all(|t| t["monotone_in_noise"] == Value::Bool(true));

    let dir = out.join("sweep");
    create_dir(&dir)?;
    write_with(&dir.join("sweep.csv"), |w| {
        use std::io::Write;
        writeln!(w, "noise_std,delay_steps,steady_state,peak,mean,faults")?;
        for r in &rows {
            writeln!(w, "{},{},{},{},{},{}", r.noise_std, r.delay_steps, r.steady_state, r.peak, r.mean, r.faults)?;
        }
        Ok(())
    })?;
    write_json(&dir.join("report.json"), &json!({ "seed": base.seed, "rows": rows, "trends": trends, "monotone": monotone }))?;
    for r in &rows {
        println!("noise_std={} delay_steps={} steady_state={:.4} faults={}", r.noise_std, r.delay_steps, r.steady_state, r.faults);
    }
    println!("{} monotone_in_noise", if monotone { "PASS" } else { "FAIL" });
    if monotone {
        Ok(())
    } else {
        Err(Failure::Check("steady-state error decreased with more noise".into()))
    }
}
