use std::path::Path;
use std::time::Duration;

use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use telesync_core::model::{Pose, TraceWindow};
use telesync_core::pipeline::{run_episode, EnvAction, FixedPolicy, Scenario};
use telesync_core::rl::{Phase, PpoConfig, Trainer};
use telesync_gateway::wire::{Outbound, SessionState, StateFrame, SummaryFrame};
use telesync_gateway::{serve, GatewayConfig, SessionInfo};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tokio::task::JoinHandle;
use tokio_tungstenite::tungstenite::Message;

struct Gateway {
    base: String,
    ws: String,
    out: tempfile::TempDir,
    http: reqwest::Client,
}

async fn gateway(rate_cap_hz: u32) -> Gateway {
    let out = tempfile::tempdir().unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let cfg = GatewayConfig {
        out_dir: out.path().to_path_buf(),
        scenario_dir: out.path().to_path_buf(),
        rate_cap_hz,
        max_frame_hz: 100,
    };
    tokio::spawn(serve(listener, cfg));
    Gateway {
        base: format!("http://{addr}"),
        ws: format!("ws://{addr}"),
        out,
        http: reqwest::Client::new(),
    }
}

impl Gateway {
    async fn create(&self, body: Value) -> (u16, Value) {
        let r = self
            .http
            .post(format!("{}/sessions", self.base))
            .json(&body)
            .send()
            .await
            .unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn session(&self, body: Value) -> String {
        let (status, v) = self.create(body).await;
        assert_eq!(status, 201, "{v}");
        v["id"].as_str().unwrap().to_string()
    }

    async fn info(&self, id: &str) -> SessionInfo {
        let r = self
            .http
            .get(format!("{}/sessions/{id}/summary", self.base))
            .send()
            .await
            .unwrap();
        assert_eq!(r.status().as_u16(), 200);
        r.json().await.unwrap()
    }

    /// Polls the summary until `done` holds.
    async fn wait_info(&self, id: &str, done: impl Fn(&SessionInfo) -> bool) -> SessionInfo {
        for _ in 0..400 {
            let i = self.info(id).await;
            if done(&i) {
                return i;
            }
            tokio::time::sleep(Duration::from_millis(25)).await;
        }
        panic!(
            "session {id} never reached the expected state: {:?}",
            self.info(id).await
        );
    }
}

type Stream = futures::stream::SplitStream<
    tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>,
>;

/// Operator client: writes go through a channel so a pose pump and the
/// test body can share the socket.
struct Client {
    tx: mpsc::UnboundedSender<Message>,
    rx: Stream,
    pump: Option<JoinHandle<()>>,
}

async fn connect(url: &str) -> Client {
    let (ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();
    let (mut sink, rx) = ws.split();
    let (tx, mut out) = mpsc::unbounded_channel::<Message>();
    tokio::spawn(async move {
        while let Some(m) = out.recv().await {
            let close = matches!(m, Message::Close(_));
            if sink.send(m).await.is_err() || close {
                break;
            }
        }
    });
    Client { tx, rx, pump: None }
}

fn pose_frame(t: i64, p: &Pose) -> Message {
    Message::Text(
        json!({ "type": "pose", "t_client_ms": t, "p": p.to_array() })
            .to_string()
            .into(),
    )
}

/// Small circle in the y-z plane around `home`, one sample per 10 ms.
fn circle(home: &Pose, t_ms: i64) -> Pose {
    let w = t_ms as f64 * 1e-3 * std::f64::consts::TAU * 0.5;
    let mut p = *home;
    p.position[1] += 0.03 * w.sin();
    p.position[2] += 0.03 * (w.cos() - 1.0);
    p
}

impl Client {
    fn send(&self, v: Value) {
        self.tx.send(Message::Text(v.to_string().into())).unwrap();
    }

    fn ctrl(&self, cmd: &str, arg: Value) {
        self.send(json!({ "type": "ctrl", "cmd": cmd, "arg": arg }));
    }

    /// Streams the circle at 100 Hz until stopped.
    fn start_pump(&mut self, home: Pose) {
        let tx = self.tx.clone();
        self.pump = Some(tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_millis(10));
            for i in 0i64.. {
                tick.tick().await;
                if tx.send(pose_frame(i * 10, &circle(&home, i * 10))).is_err() {
                    break;
                }
            }
        }));
    }

    fn stop_pump(&mut self) {
        if let Some(p) = self.pump.take() {
            p.abort();
        }
    }

    async fn next(&mut self) -> Outbound {
        loop {
            let msg = tokio::time::timeout(Duration::from_secs(20), self.rx.next())
                .await
                .expect("gateway went quiet")
                .expect("socket closed")
                .unwrap();
            if let Message::Text(t) = msg {
                return serde_json::from_str(t.as_str()).unwrap_or_else(|e| panic!("bad frame {t}: {e}"));
            }
        }
    }

    /// Skips state frames until some other frame arrives.
    async fn next_event(&mut self) -> Outbound {
        loop {
            match self.next().await {
                Outbound::State(_) => {}
                other => return other,
            }
        }
    }

    /// Collects state frames until the episode summary arrives.
    async fn until_summary(&mut self) -> (Vec<StateFrame>, SummaryFrame) {
        let mut frames = Vec::new();
        loop {
            match self.next().await {
                Outbound::State(f) => frames.push(*f),
                Outbound::Summary(s) => return (frames, *s),
                _ => {}
            }
        }
    }

    /// Answers the clock handshake as a client whose clock reads `skew` ms
    /// ahead. Returns the offset the server settled on.
    async fn sync(&mut self, skew: i64) -> f64 {
        loop {
            match self.next().await {
                Outbound::Sync { seq, t_server_ms } => {
                    self.send(json!({ "type": "sync", "seq": seq, "t_server_ms": t_server_ms, "t_client_ms": t_server_ms + skew }));
                }
                Outbound::Ack { cmd, detail, .. } if cmd == "sync" => {
                    return detail["clock_offset_ms"].as_f64().unwrap()
                }
                other => panic!("unexpected frame during sync: {other:?}"),
            }
        }
    }
}

fn home(sc: &Scenario) -> Pose {
    let chain = sc.chain().unwrap();
    chain.forward_kinematics(&chain.home()).unwrap()
}

fn short_scenario(duration_ms: u64, seed: u64) -> Scenario {
    Scenario {
        duration_ms,
        seed,
        ..Scenario::default()
    }
}

fn read_trace(path: &Path) -> TraceWindow {
    TraceWindow::read_csv(std::fs::File::open(path).unwrap()).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn health_and_session_errors() {
    let gw = gateway(200).await;
    let v: Value = gw
        .http
        .get(format!("{}/healthz", gw.base))
        .send()
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert_eq!(v["status"], "ok");

    let r = gw
        .http
        .get(format!("{}/sessions/nope/summary", gw.base))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 404);
    let (status, v) = gw.create(json!({ "scenario": "missing.toml" })).await;
    assert_eq!(status, 400);
    assert!(v["error"].as_str().unwrap().contains("missing.toml"), "{v}");
    let (status, _) = gw.create(json!({ "policy": "sometimes" })).await;
    assert_eq!(status, 400);
    let (status, _) = gw.create(json!({ "scenario": { "duration_ms": 0 } })).await;
    assert_eq!(status, 400);
    let (status, _) = gw.create(json!({ "checkpoint": "/nonexistent/ck.bin" })).await;
    assert_eq!(status, 400);

    std::fs::write(gw.out.path().join("s.toml"), short_scenario(1000, 3).to_toml()).unwrap();
    let (status, v) = gw.create(json!({ "scenario": "s.toml", "seed": 9 })).await;
    assert_eq!(status, 201, "{v}");
    assert_eq!(v["state"], "idle");
}

#[tokio::test(flavor = "multi_thread")]
async fn clock_handshake_and_single_operator() {
    let gw = gateway(200).await;
    let id = gw.session(json!({})).await;
    let url = format!("{}/sessions/{id}/ws", gw.ws);
    let mut c = connect(&url).await;
    let offset = c.sync(5000).await;
    // loopback round trips are a few ms at most
    assert!((offset - 5000.0).abs() <= 5.0, "offset {offset}");
    let info = gw.info(&id).await;
    assert_eq!(info.clock_offset_ms, Some(offset));

    let second = tokio_tungstenite::connect_async(&url).await;
    assert!(second.is_err(), "a second operator must be refused");
}

#[tokio::test(flavor = "multi_thread")]
async fn every_frame_of_a_burst_is_counted() {
    let gw = gateway(100_000).await;
    let sc = short_scenario(1000, 1);
    let id = gw.session(json!({})).await;
    let mut c = connect(&format!("{}/sessions/{id}/ws", gw.ws)).await;
    c.sync(0).await;
    let h = home(&sc);
    for i in 0..1000 {
        c.tx.send(pose_frame(i, &circle(&h, i))).unwrap();
    }
    // one stale and one malformed frame on top
    c.tx.send(pose_frame(10, &h)).unwrap();
    c.send(json!({ "type": "pose", "p": [1, 2] }));
    let info = gw
        .wait_info(&id, |i| i.counters.received + i.counters.malformed >= 1002)
        .await;
    let k = info.counters;
    assert_eq!(
        (k.received, k.accepted, k.stale, k.rate_dropped, k.malformed),
        (1001, 1000, 1, 0, 1)
    );
    match c.next_event().await {
        Outbound::Err { code, state, .. } => {
            assert_eq!(code, telesync_gateway::wire::ErrCode::Malformed);
            assert_eq!(state, SessionState::Idle);
        }
        other => panic!("expected an error frame, got {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn flood_over_the_cap_is_dropped_and_reported() {
    let gw = gateway(200).await;
    let sc = short_scenario(1000, 1);
    let id = gw.session(json!({})).await;
    let mut c = connect(&format!("{}/sessions/{id}/ws", gw.ws)).await;
    c.sync(0).await;
    let h = home(&sc);
    for i in 0..600 {
        c.tx.send(pose_frame(i, &h)).unwrap();
    }
    match c.next_event().await {
        Outbound::Err { code, .. } => assert_eq!(code, telesync_gateway::wire::ErrCode::RateCap),
        other => panic!("expected a rate-cap notice, got {other:?}"),
    }
    let info = gw.wait_info(&id, |i| i.counters.received >= 600).await;
    assert!(info.counters.accepted >= 200, "{:?}", info.counters);
    assert!(info.counters.rate_dropped >= 300, "{:?}", info.counters);
    assert_eq!(info.counters.accepted + info.counters.rate_dropped, 600);
}

#[tokio::test(flavor = "multi_thread")]
async fn illegal_commands_are_rejected_with_the_current_state() {
    let gw = gateway(200).await;
    let id = gw.session(json!({})).await;
    let mut c = connect(&format!("{}/sessions/{id}/ws", gw.ws)).await;
    c.sync(0).await;
    c.ctrl("stop", Value::Null);
    match c.next_event().await {
        Outbound::Err { cmd, code, state, .. } => {
            assert_eq!(cmd.as_deref(), Some("stop"));
            assert_eq!(code, telesync_gateway::wire::ErrCode::IllegalTransition);
            assert_eq!(state, SessionState::Idle);
        }
        other => panic!("{other:?}"),
    }
    c.ctrl("start_hitl_episode", Value::Null);
    match c.next_event().await {
        Outbound::Err { message, state, .. } => {
            assert!(message.contains("no checkpoint"), "{message}");
            assert_eq!(state, SessionState::Idle);
        }
        other => panic!("{other:?}"),
    }
    c.ctrl("set_policy", json!("fixed:-3"));
    assert!(matches!(c.next_event().await, Outbound::Err { .. }));
    c.send(json!({ "type": "ctrl", "cmd": "launch" }));
    assert!(matches!(c.next_event().await, Outbound::Err { .. }));
    c.ctrl("set_policy", json!("fixed:30"));
    match c.next_event().await {
        Outbound::Ack { cmd, state, .. } => {
            assert_eq!(cmd, "set_policy");
            assert_eq!(state, SessionState::Idle);
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(gw.info(&id).await.policy, "fixed:30");
}

#[tokio::test(flavor = "multi_thread")]
async fn live_episode_matches_offline_replay() {
    let gw = gateway(200).await;
    let sc = short_scenario(3000, 17);
    let h = home(&sc);
    let id = gw.session(json!({ "scenario": sc, "policy": "fixed:40" })).await;
    let mut c = connect(&format!("{}/sessions/{id}/ws", gw.ws)).await;
    c.sync(0).await;
    c.start_pump(h);
    tokio::time::sleep(Duration::from_millis(50)).await;
    c.ctrl("start", Value::Null);
    match c.next_event().await {
        Outbound::Ack { cmd, state, .. } => {
            assert_eq!(cmd, "start");
            assert_eq!(state, SessionState::Running);
        }
        other => panic!("{other:?}"),
    }
    let (frames, summary) = c.until_summary().await;
    c.stop_pump();

    assert_eq!(summary.ticks, 3000);
    assert!(!summary.disconnected);
    assert_eq!(summary.policy, "fixed:40");
    let metrics = summary.metrics.expect("a 3 s episode is scored");
    assert!(metrics.rmse_p_om > 0.0 && metrics.rmse_p_om < 0.05, "{metrics:?}");
    // paced at 1 ms per tick, shown at the render rate
    assert!(frames.len() >= 100, "only {} state frames", frames.len());
    assert!(frames.iter().all(|f| f.h_r == 40 && f.h_c == 40));
    assert!(frames.windows(2).all(|w| w[0].tick < w[1].tick));
    assert!(frames.iter().all(|f| f.clock_offset_ms.is_some()));
    assert_eq!(gw.info(&id).await.state, SessionState::Idle);

    let dir = Path::new(summary.log_dir.as_deref().unwrap());
    let replay_sc = Scenario::load(&dir.join("scenario.toml")).unwrap();
    assert_eq!(replay_sc.duration_ms, 3000);
    let source = replay_sc.source.build(&h, replay_sc.seed, None).unwrap();
    let offline = run_episode(&replay_sc, &mut FixedPolicy(EnvAction::same(40)), source).unwrap();
    assert_eq!(offline.real, read_trace(&dir.join("real.csv")));
    assert_eq!(offline.virtual_pose, read_trace(&dir.join("virtual.csv")));
    for f in &frames {
        assert_eq!(
            offline.real.at(f.tick).unwrap().to_array(),
            f.real.pose,
            "tick {}",
            f.tick
        );
        assert_eq!(
            offline.virtual_pose.at(f.tick).unwrap().to_array(),
            f.displayed,
            "tick {}",
            f.tick
        );
        assert_eq!(
            offline.operator.at(f.tick).unwrap().to_array(),
            f.operator,
            "tick {}",
            f.tick
        );
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn policy_switch_lands_on_a_decision_boundary() {
    let gw = gateway(200).await;
    let sc = short_scenario(20_000, 2);
    let h = home(&sc);
    let id = gw.session(json!({ "scenario": sc })).await;
    let mut c = connect(&format!("{}/sessions/{id}/ws", gw.ws)).await;
    c.sync(0).await;
    c.start_pump(h);
    c.ctrl("start", Value::Null);
    assert!(matches!(c.next_event().await, Outbound::Ack { .. }));
    tokio::time::sleep(Duration::from_millis(330)).await;
    c.ctrl("set_policy", json!("fixed:80"));
    match c.next_event().await {
        Outbound::Ack { cmd, state, detail } => {
            assert_eq!(cmd, "set_policy");
            assert_eq!(state, SessionState::Running);
            assert_eq!(detail["effective"], "next decision boundary");
        }
        other => panic!("{other:?}"),
    }
    tokio::time::sleep(Duration::from_millis(300)).await;
    c.ctrl("stop", Value::Null);
    let (_, summary) = c.until_summary().await;
    c.stop_pump();
    assert!(summary.ticks < 20_000);
    assert_eq!(summary.policy, "zero then fixed:80");

    let dir = Path::new(summary.log_dir.as_deref().unwrap());
    let mut rd = csv::Reader::from_path(dir.join("decisions.csv")).unwrap();
    let rows: Vec<(u64, u64)> = rd
        .deserialize::<telesync_core::pipeline::DecisionRecord>()
        .map(|r| r.map(|d| (d.tick, d.h_r)).unwrap())
        .collect();
    assert!(rows.iter().all(|(t, _)| t % 50 == 0));
    let switch = rows.iter().position(|&(_, h)| h == 80).expect("switch happened");
    assert!(switch > 0);
    assert!(rows[..switch].iter().all(|&(_, h)| h == 0));
    assert!(rows[switch..].iter().all(|&(_, h)| h == 80));
}

#[tokio::test(flavor = "multi_thread")]
async fn disconnect_closes_the_session_and_flushes_the_log() {
    let gw = gateway(200).await;
    let sc = short_scenario(20_000, 5);
    let h = home(&sc);
    let id = gw.session(json!({ "scenario": sc, "policy": "oracle" })).await;
    let mut c = connect(&format!("{}/sessions/{id}/ws", gw.ws)).await;
    c.sync(0).await;
    c.start_pump(h);
    c.ctrl("start", Value::Null);
    assert!(matches!(c.next_event().await, Outbound::Ack { .. }));
    tokio::time::sleep(Duration::from_millis(400)).await;
    c.stop_pump();
    c.tx.send(Message::Close(None)).unwrap();
    drop(c);

    let info = gw.wait_info(&id, |i| i.last_episode.is_some()).await;
    assert_eq!(info.state, SessionState::Closed);
    let last = info.last_episode.unwrap();
    assert!(last.disconnected);
    assert!(last.ticks > 200 && last.ticks < 20_000, "{}", last.ticks);
    let dir = Path::new(last.log_dir.as_deref().unwrap());
    assert_eq!(read_trace(&dir.join("operator.csv")).len() as u64, last.ticks);
    let r = gw
        .http
        .get(format!("{}/sessions/{id}/feed", gw.ws.replace("ws://", "http://")))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 410);
}

fn checkpoint(dir: &Path, sc: &Scenario) -> std::path::PathBuf {
    let cfg = PpoConfig {
        hidden: vec![16],
        ..sc.ppo.clone()
    };
    let tr = Trainer::new(cfg, sc.horizons, 4).unwrap();
    let path = dir.join("start.bin");
    tr.checkpoint().save(&path).unwrap();
    path
}

#[tokio::test(flavor = "multi_thread")]
async fn hitl_episode_trains_and_saves_a_checkpoint() {
    let gw = gateway(200).await;
    let mut sc = short_scenario(20_000, 8);
    sc.ppo.hitl_episode_ms = 800;
    let h = home(&sc);
    let ck = checkpoint(gw.out.path(), &sc);
    let id = gw.session(json!({ "scenario": sc, "checkpoint": ck })).await;
    let mut c = connect(&format!("{}/sessions/{id}/ws", gw.ws)).await;
    c.sync(0).await;
    c.start_pump(h);
    c.ctrl("start_hitl_episode", Value::Null);
    match c.next_event().await {
        Outbound::Ack { state, .. } => assert_eq!(state, SessionState::Hitl),
        other => panic!("{other:?}"),
    }
    // the learner owns the horizons during training
    c.ctrl("set_policy", json!("zero"));
    assert!(matches!(
        c.next_event().await,
        Outbound::Err {
            state: SessionState::Hitl,
            ..
        }
    ));
    let (_, summary) = c.until_summary().await;
    c.stop_pump();
    assert_eq!(summary.ticks, 800);
    assert_eq!(summary.policy, "learned:hitl");
    assert!(!summary.discarded, "{summary:?}");
    let reward = summary.mean_reward.unwrap();
    assert!(reward.is_finite() && reward <= 0.0);
    let saved = telesync_core::rl::Checkpoint::load(Path::new(summary.checkpoint.as_deref().unwrap())).unwrap();
    assert_eq!(saved.header.phase, Phase::Hitl);
    assert_eq!(saved.header.episodes, 1);
    assert_eq!(gw.info(&id).await.state, SessionState::Idle);
}

#[tokio::test(flavor = "multi_thread")]
async fn feed_tap_reaches_the_cli_reader() {
    let gw = gateway(200).await;
    let sc = short_scenario(1000, 1);
    let h = home(&sc);
    let id = gw.session(json!({})).await;
    let mut c = connect(&format!("{}/sessions/{id}/ws", gw.ws)).await;
    c.sync(0).await;
    let feed = format!("{}/sessions/{id}/feed", gw.ws);
    let reader = tokio::task::spawn_blocking({
        let feed = feed.clone();
        move || {
            telesync_cli::probe_gateway(&feed).unwrap();
            telesync_cli::WsFeed::new(feed, Pose::default()).open().unwrap()
        }
    })
    .await
    .unwrap();
    c.start_pump(h);
    let got = tokio::task::spawn_blocking(move || {
        use telesync_core::pipeline::TrajectorySource;
        let mut src = reader;
        for t in 0..200 {
            let p = src.pose_at(t);
            if p != Pose::default() {
                return Some(p);
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        None
    })
    .await
    .unwrap();
    c.stop_pump();
    let p = got.expect("no pose arrived through the feed");
    assert!(p.position_distance(&h) < 0.05);
}

#[tokio::test(flavor = "multi_thread")]
async fn idle_operator_still_gets_frames() {
    let gw = gateway(200).await;
    let sc = short_scenario(500, 4);
    let h = home(&sc);
    let id = gw.session(json!({ "scenario": sc })).await;
    let mut c = connect(&format!("{}/sessions/{id}/ws", gw.ws)).await;
    c.sync(0).await;
    c.ctrl("start", Value::Null);
    assert!(matches!(c.next_event().await, Outbound::Ack { .. }));
    let (frames, summary) = c.until_summary().await;
    assert_eq!(summary.ticks, 500);
    assert!(summary.metrics.is_some());
    // 100 Hz cap over 0.5 s, less whatever was sent before subscribing
    assert!(frames.len() >= 40, "{} frames", frames.len());
    assert!(frames.iter().all(|f| f.operator == h.to_array()));
}
