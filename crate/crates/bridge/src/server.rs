//! HTTP and WebSocket front end. Each session runs its own tick loop task
//! that drains a mailbox of client messages before every fixed step.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chase_core::config::RunConfig;
use futures_util::{SinkExt, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::{broadcast, mpsc};
use tokio::time::{Instant, MissedTickBehavior};

use crate::protocol::{Mode, ServerFrame};
use crate::session::{Segment, Session};

/// Frames buffered per slow client before the oldest are dropped.
const BROADCAST_DEPTH: usize = 64;
const DIRECT_DEPTH: usize = 64;
const MAILBOX_DEPTH: usize = 1024;
/// A session nobody joins within this time is closed.
const JOIN_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: u64,
    pub tick: u64,
    pub mode: Option<Mode>,
    pub clients: usize,
    /// Ticks that started more than one period late.
    pub missed_deadlines: u64,
}

struct Handle {
    mailbox: mpsc::Sender<Inbound>,
    frames: broadcast::Sender<Arc<str>>,
    info: Arc<Mutex<SessionInfo>>,
}

enum Inbound {
    Join { client: u64, direct: mpsc::Sender<Arc<str>> },
    Text { client: u64, text: String, at: Instant },
    Leave { client: u64 },
}

pub struct AppState {
    config: RunConfig,
    log_dir: Option<PathBuf>,
    sessions: Mutex<HashMap<u64, Handle>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(config: RunConfig, log_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self { config, log_dir, sessions: Mutex::new(HashMap::new()), next_id: AtomicU64::new(1) })
    }

    fn infos(&self) -> Vec<SessionInfo> {
        let sessions = self.sessions.lock().expect("session registry poisoned");
        let mut v: Vec<SessionInfo> =
            sessions.values().map(|h| h.info.lock().expect("session info poisoned").clone()).collect();
        v.sort_by_key(|i| i.id);
        v
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", get(sessions))
        .route("/session", get(session_ws))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let n = state.sessions.lock().expect("session registry poisoned").len();
    Json(serde_json::json!({ "status": "ok", "sessions": n }))
}

async fn sessions(State(state): State<Arc<AppState>>) -> Json<Vec<SessionInfo>> {
    Json(state.infos())
}

#[derive(Debug, Deserialize)]
struct SessionQuery {
    /// Join this running session instead of starting a new one.
    id: Option<u64>,
}

async fn session_ws(
    State(state): State<Arc<AppState>>,
    Query(q): Query<SessionQuery>,
    ws: WebSocketUpgrade,
) -> Response {
    let attached = match q.id {
        Some(id) => {
            let sessions = state.sessions.lock().expect("session registry poisoned");
            match sessions.get(&id) {
                Some(h) => Ok((id, h.mailbox.clone(), h.frames.subscribe())),
                None => Err((axum::http::StatusCode::NOT_FOUND, format!("no session {id}"))),
            }
        }
        None => start_session(&state),
    };
    match attached {
        Ok((id, mailbox, frames)) => ws.on_upgrade(move |socket| client(socket, state, id, mailbox, frames)),
        Err(e) => e.into_response(),
    }
}

type Attached = (u64, mpsc::Sender<Inbound>, broadcast::Receiver<Arc<str>>);

fn start_session(state: &Arc<AppState>) -> Result<Attached, (axum::http::StatusCode, String)> {
    let internal = |e: chase_core::Error| (axum::http::StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    let scenario = state.config.live_scenario(id - 1).map_err(internal)?;
    let session = Session::new(id, scenario, state.config.controller_config().map_err(internal)?).map_err(internal)?;
    let (mailbox, rx) = mpsc::channel(MAILBOX_DEPTH);
    let (frames, sub) = broadcast::channel(BROADCAST_DEPTH);
    let info = Arc::new(Mutex::new(SessionInfo { id, mode: Some(Mode::Live), ..Default::default() }));
    state.sessions.lock().expect("session registry poisoned").insert(
        id,
        Handle { mailbox: mailbox.clone(), frames: frames.clone(), info: info.clone() },
    );
    let period = Duration::from_secs_f64(state.config.mpc.dt);
    tokio::spawn(tick_loop(session, rx, frames, info, period, state.clone()));
    tracing::info!(session = id, "session started");
    Ok((id, mailbox, sub))
}

async fn client(
    socket: WebSocket,
    state: Arc<AppState>,
    session: u64,
    mailbox: mpsc::Sender<Inbound>,
    mut frames: broadcast::Receiver<Arc<str>>,
) {
    static CLIENTS: AtomicU64 = AtomicU64::new(1);
    let client = CLIENTS.fetch_add(1, Ordering::Relaxed);
    let (direct, mut direct_rx) = mpsc::channel::<Arc<str>>(DIRECT_DEPTH);
    if mailbox.send(Inbound::Join { client, direct }).await.is_err() {
        return;
    }
    let (mut tx, mut rx) = socket.split();
    let writer = tokio::spawn(async move {
        loop {
            let text = tokio::select! {
                f = frames.recv() => match f {
                    Ok(t) => t,
                    Err(broadcast::error::RecvError::Lagged(n)) => {
                        tracing::debug!(session, client, skipped = n, "slow client, dropped oldest frames");
                        continue;
                    }
                    Err(broadcast::error::RecvError::Closed) => break,
                },
                d = direct_rx.recv() => match d {
                    Some(t) => t,
                    None => break,
                },
            };
            if tx.send(Message::Text(text.as_ref().into())).await.is_err() {
                break;
            }
        }
        let _ = tx.close().await;
    });
    while let Some(Ok(msg)) = rx.next().await {
        let text = match msg {
            Message::Text(t) => t.to_string(),
            Message::Binary(b) => String::from_utf8_lossy(&b).into_owned(),
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => continue,
        };
        if let Err(mpsc::error::TrySendError::Full(_)) =
            mailbox.try_send(Inbound::Text { client, text, at: Instant::now() })
        {
            tracing::warn!(session, client, "mailbox full, message dropped");
        }
    }
    let _ = mailbox.send(Inbound::Leave { client }).await;
    writer.abort();
    tracing::debug!(session, client, "client left; {} sessions", state.infos().len());
}

async fn tick_loop(
    mut session: Session,
    mut rx: mpsc::Receiver<Inbound>,
    frames: broadcast::Sender<Arc<str>>,
    info: Arc<Mutex<SessionInfo>>,
    period: Duration,
    state: Arc<AppState>,
) {
    let id = session.id();
    let origin = Instant::now();
    let mut clients: HashMap<u64, mpsc::Sender<Arc<str>>> = HashMap::new();
    let mut joined = false;
    let mut segments = 0usize;
    let mut missed = 0u64;
    let mut interval = tokio::time::interval(period);
    // late ticks run back to back; none are skipped
    interval.set_missed_tick_behavior(MissedTickBehavior::Burst);
    'run: loop {
        let scheduled = interval.tick().await;
        let late = Instant::now().saturating_duration_since(scheduled);
        if late > period {
            missed += 1;
            tracing::warn!(session = id, late_ms = late.as_millis() as u64, "tick deadline missed");
        }
        loop {
            match rx.try_recv() {
                Ok(Inbound::Join { client, direct }) => {
                    clients.insert(client, direct);
                    joined = true;
                }
                Ok(Inbound::Leave { client }) => {
                    clients.remove(&client);
                }
                Ok(Inbound::Text { client, text, at }) => {
                    let now = at.saturating_duration_since(origin).as_secs_f64();
                    for frame in session.accept(&text, now, wall_ms()) {
                        let json: Arc<str> = frame.to_json().into();
                        match frame {
                            ServerFrame::Mode { .. } => {
                                let _ = frames.send(json);
                            }
                            _ => {
                                if let Some(d) = clients.get(&client) {
                                    let _ = d.try_send(json);
                                }
                            }
                        }
                    }
                    for seg in session.take_closed() {
                        persist(&state.log_dir, id, segments, &seg);
                        segments += 1;
                    }
                }
                Err(mpsc::error::TryRecvError::Empty) => break,
                Err(mpsc::error::TryRecvError::Disconnected) => break 'run,
            }
        }
        if clients.is_empty() && (joined || origin.elapsed() > JOIN_TIMEOUT) {
            break;
        }
        if let Some(frame) = session.step(wall_ms()) {
            let _ = frames.send(frame.to_json().into());
        }
        let mut i = info.lock().expect("session info poisoned");
        i.tick = session.tick();
        i.mode = Some(session.mode());
        i.clients = clients.len();
        i.missed_deadlines = missed;
    }
    state.sessions.lock().expect("session registry poisoned").remove(&id);
    for seg in session.finish() {
        persist(&state.log_dir, id, segments, &seg);
        segments += 1;
    }
    tracing::info!(session = id, "session closed");
}

fn wall_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

/// Segment logs in the batch formats plus the input recording.
pub fn write_segment(dir: &Path, seg: &Segment) -> std::io::Result<()> {
    use std::fs::File;
    use std::io::BufWriter;
    std::fs::create_dir_all(dir)?;
    seg.log.write_csv(BufWriter::new(File::create(dir.join("log.csv"))?))?;
    seg.log.write_sectors_csv(BufWriter::new(File::create(dir.join("sectors.csv"))?))?;
    seg.log.write_events_csv(BufWriter::new(File::create(dir.join("events.csv"))?))?;
    seg.log
        .write_json(BufWriter::new(File::create(dir.join("log.json"))?))
        .map_err(std::io::Error::other)?;
    let rec = serde_json::to_vec_pretty(&seg.recording).map_err(std::io::Error::other)?;
    std::fs::write(dir.join("recording.json"), rec)
}

fn persist(log_dir: &Option<PathBuf>, id: u64, index: usize, seg: &Segment) {
    let Some(root) = log_dir else { return };
    let dir = root.join(format!("session-{id}")).join(format!("segment-{index}"));
    match write_segment(&dir, seg) {
        Ok(()) => tracing::info!(session = id, dir = %dir.display(), "segment saved"),
        Err(e) => tracing::error!(session = id, "cannot save segment: {e}"),
    }
}
