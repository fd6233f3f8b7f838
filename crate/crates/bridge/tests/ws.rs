use std::net::SocketAddr;
use std::time::Duration;

use chase_bridge::server::write_segment;
use chase_bridge::{replay, router, AppState, Recording, Segment};
use chase_core::config::RunConfig;
use futures_util::{SinkExt, StreamExt};
use serde_json::Value;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio_tungstenite::tungstenite::Message;

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn serve(log_dir: Option<std::path::PathBuf>) -> SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let app = router(AppState::new(RunConfig::default_config(), log_dir));
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    addr
}

async fn get_json(addr: SocketAddr, path: &str) -> Value {
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    s.write_all(format!("GET {path} HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").as_bytes()).await.unwrap();
    let mut buf = String::new();
    s.read_to_string(&mut buf).await.unwrap();
    assert!(buf.starts_with("HTTP/1.1 200"), "{buf}");
    serde_json::from_str(buf.split("\r\n\r\n").nth(1).unwrap()).unwrap()
}

async fn connect(addr: SocketAddr, query: &str) -> Ws {
    tokio_tungstenite::connect_async(format!("ws://{addr}/session{query}")).await.unwrap().0
}

async fn next_frame(ws: &mut Ws) -> Value {
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(5), ws.next()).await.expect("frame in time").unwrap().unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

async fn frame_of_type(ws: &mut Ws, kind: &str) -> Value {
    for _ in 0..200 {
        let f = next_frame(ws).await;
        assert!(f["tick"].is_u64() && f["wall_ms"].is_u64(), "{f}");
        if f["type"] == kind {
            return f;
        }
    }
    panic!("no {kind} frame within 200 frames");
}

async fn send(ws: &mut Ws, text: &str) {
    ws.send(Message::Text(text.into())).await.unwrap();
}

#[tokio::test]
async fn health_and_session_listing() {
    let addr = serve(None).await;
    assert_eq!(get_json(addr, "/health").await["status"], "ok");
    let mut a = connect(addr, "").await;
    let first = frame_of_type(&mut a, "state").await;
    let id = 1;
    let mut b = connect(addr, &format!("?id={id}")).await;
    let later = frame_of_type(&mut b, "state").await;
    assert!(later["tick"].as_u64() > first["tick"].as_u64());
    frame_of_type(&mut a, "state").await;
    let list = get_json(addr, "/sessions").await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["id"], id);
    assert_eq!(list[0]["clients"], 2);
    assert_eq!(list[0]["mode"], "live");
}

#[tokio::test]
async fn state_frames_arrive_every_tick() {
    let addr = serve(None).await;
    let mut ws = connect(addr, "").await;
    let mut prev = frame_of_type(&mut ws, "state").await["tick"].as_u64().unwrap();
    for _ in 0..20 {
        let t = frame_of_type(&mut ws, "state").await["tick"].as_u64().unwrap();
        assert_eq!(t, prev + 1);
        prev = t;
    }
}

#[tokio::test]
async fn steer_is_acked_clamped_and_applied() {
    let cfg = RunConfig::default_config();
    let addr = serve(None).await;
    let mut ws = connect(addr, "").await;
    frame_of_type(&mut ws, "state").await;
    send(&mut ws, &format!(r#"{{"type":"steer","speed":{},"heading_rate":0.0}}"#, 2.0 * cfg.priors.v_max)).await;
    // Acks and state frames travel on separate channels, so the state frame
    // for the effect tick may arrive before its ack.
    let mut states = Vec::new();
    let mut ack: Option<Value> = None;
    for _ in 0..100 {
        let f = next_frame(&mut ws).await;
        match f["type"].as_str() {
            Some("ack") => ack = Some(f),
            Some("state") => states.push(f),
            _ => {}
        }
        if let Some(a) = &ack {
            let effect = a["effect_tick"].as_u64().unwrap();
            if states.iter().any(|s| s["tick"].as_u64().unwrap() >= effect) {
                break;
            }
        }
    }
    let ack = ack.expect("ack within 100 frames");
    let effect = ack["effect_tick"].as_u64().unwrap();
    assert_eq!(effect, ack["tick"].as_u64().unwrap() + 1);
    assert_eq!(ack["steer"]["speed"], cfg.priors.v_max);
    let applied = states.iter().find(|s| s["tick"].as_u64() == Some(effect)).expect("state frame at the effect tick");
    assert_eq!(applied["steer"]["speed"], cfg.priors.v_max);
}

#[tokio::test]
async fn bad_messages_get_error_frames() {
    let addr = serve(None).await;
    let mut ws = connect(addr, "").await;
    send(&mut ws, "{oops").await;
    assert_eq!(frame_of_type(&mut ws, "error").await["code"], "malformed");
    send(&mut ws, r#"{"type":"teleport"}"#).await;
    assert_eq!(frame_of_type(&mut ws, "error").await["code"], "unknown_type");
    // the session keeps ticking
    frame_of_type(&mut ws, "state").await;
}

#[tokio::test]
async fn pause_stops_frames_until_resume() {
    let addr = serve(None).await;
    let mut ws = connect(addr, "").await;
    frame_of_type(&mut ws, "state").await;
    send(&mut ws, r#"{"type":"pause"}"#).await;
    let mode = frame_of_type(&mut ws, "mode").await;
    assert_eq!(mode["mode"], "paused");
    let paused_at = mode["tick"].as_u64().unwrap();
    let quiet = tokio::time::timeout(Duration::from_millis(300), async {
        loop {
            let f = next_frame(&mut ws).await;
            if f["type"] == "state" {
                return f;
            }
        }
    })
    .await;
    assert!(quiet.is_err(), "state frame after pause: {quiet:?}");
    send(&mut ws, r#"{"type":"resume"}"#).await;
    assert_eq!(frame_of_type(&mut ws, "mode").await["mode"], "live");
    assert_eq!(frame_of_type(&mut ws, "state").await["tick"].as_u64().unwrap(), paused_at + 1);
}

#[tokio::test]
async fn unknown_session_is_not_found() {
    let addr = serve(None).await;
    assert!(tokio_tungstenite::connect_async(format!("ws://{addr}/session?id=999")).await.is_err());
}

#[tokio::test]
async fn recorded_session_replays_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let addr = serve(Some(tmp.path().to_path_buf())).await;
    let mut ws = connect(addr, "").await;
    for k in 0..12 {
        let speed = 0.1 * (k % 6) as f64;
        let rate = if k % 2 == 0 { 0.8 } else { -0.5 };
        send(&mut ws, &format!(r#"{{"type":"steer","speed":{speed},"heading_rate":{rate}}}"#)).await;
        frame_of_type(&mut ws, "ack").await;
        for _ in 0..3 {
            frame_of_type(&mut ws, "state").await;
        }
    }
    ws.close(None).await.unwrap();
    let seg = tmp.path().join("session-1/segment-0");
    for _ in 0..100 {
        if seg.join("recording.json").exists() {
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    let recording: Recording = serde_json::from_str(&std::fs::read_to_string(seg.join("recording.json")).unwrap()).unwrap();
    assert!(recording.ticks >= 36);
    assert!(recording.inputs.len() >= 6);
    let cfg = RunConfig::default_config();
    let log = replay(&recording, cfg.controller_config().unwrap()).unwrap();
    let out = tmp.path().join("replayed");
    write_segment(&out, &Segment { recording, log }).unwrap();
    for file in ["log.csv", "sectors.csv", "events.csv", "log.json"] {
        assert_eq!(std::fs::read(seg.join(file)).unwrap(), std::fs::read(out.join(file)).unwrap(), "{file}");
    }
}
