//! `chase-bridge`: serve live sessions, or replay a recorded one offline.

use std::path::PathBuf;
use std::process::ExitCode;

use chase_bridge::server::write_segment;
use chase_bridge::{replay, router, AppState, Recording, Segment};
use chase_core::config::RunConfig;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "chase-bridge", version, about = "Live pursuit sessions over WebSocket")]
struct Cli {
    /// TOML config; the shipped defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Serve /session, /health and /sessions (the default).
    Serve {
        /// Listen address; overrides `bridge.addr`.
        #[arg(long, env = "CHASE_BRIDGE_ADDR")]
        addr: Option<String>,
        /// Directory for per-session logs; nothing is saved when omitted.
        #[arg(long, env = "CHASE_LOG_DIR")]
        log_dir: Option<PathBuf>,
    },
    /// Re-run a `recording.json` and write its logs to `out`.
    Replay {
        recording: PathBuf,
        #[arg(long, default_value = "replay")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let ansi = std::io::IsTerminal::is_terminal(&std::io::stderr());
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_target(false).with_ansi(ansi).init();
    let cli = Cli::parse();
    let config = match &cli.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default_config()),
    };
    let config = match config {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match cli.command.unwrap_or(Command::Serve { addr: None, log_dir: None }) {
        Command::Serve { addr, log_dir } => serve(config, addr, log_dir),
        Command::Replay { recording, out } => run_replay(&config, &recording, &out),
    }
}

fn serve(config: RunConfig, addr: Option<String>, log_dir: Option<PathBuf>) -> ExitCode {
    let addr = addr.unwrap_or_else(|| config.bridge.addr.clone());
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: cannot start runtime: {e}");
            return ExitCode::FAILURE;
        }
    };
    rt.block_on(async move {
        let listener = match tokio::net::TcpListener::bind(&addr).await {
            Ok(l) => l,
            Err(e) => {
                eprintln!("error: cannot bind {addr}: {e}");
                return ExitCode::from(2);
            }
        };
        tracing::info!("listening on {addr}");
        match axum::serve(listener, router(AppState::new(config, log_dir))).await {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        }
    })
}

fn run_replay(config: &RunConfig, path: &PathBuf, out: &PathBuf) -> ExitCode {
    let recording: Recording = match std::fs::read_to_string(path)
        .map_err(|e| e.to_string())
        .and_then(|t| serde_json::from_str(&t).map_err(|e| e.to_string()))
    {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot read recording {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    let controller = match config.controller_config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match replay(&recording, controller) {
        Ok(log) => match write_segment(out, &Segment { recording, log }) {
            Ok(()) => {
                println!("replayed into {}", out.display());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
        Err(e) => {
            eprintln!("error: replay failed: {e}");
            ExitCode::FAILURE
        }
    }
}
