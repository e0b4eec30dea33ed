use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use telesync_core::model::{Pose, Tick};
use telesync_core::pipeline::{
    EnvState, EpisodeLog, EpisodeSummary, LiveSource, PipelineError, PolicySpec, Scenario, SourceSpec,
};
use telesync_core::rl::{self, checkpoint_file, write_curve, Checkpoint, Phase, Trainer, CURVE_FILE};
use tokio::sync::{broadcast, mpsc as tmpsc, watch};

use crate::clock::SyncStep;
use crate::core::{Counters, Ingest, SessionCore};
use crate::runner::{self, ClockOffset, Driver, Finished, Job, LoopCmd};
use crate::wire::{CtrlCmd, EpisodeKind, ErrCode, Inbound, Outbound, SessionState, StateFrame, SummaryFrame};
use crate::GatewayConfig;

/// Body of `POST /sessions`. Every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateSession {
    pub scenario: Option<ScenarioArg>,
    /// Policy for plain episodes; `zero` when absent.
    pub policy: Option<String>,
    pub seed: Option<u64>,
    /// Starting point for human-in-the-loop episodes.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScenarioArg {
    /// Scenario file, relative to the gateway's scenario directory.
    Path(PathBuf),
    Inline(Box<Scenario>),
}

/// What `GET /sessions/{id}/summary` returns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionInfo {
    pub id: String,
    pub state: SessionState,
    pub policy: String,
    pub checkpoint: Option<String>,
    pub counters: Counters,
    pub clock_offset_ms: Option<f64>,
    pub episodes: usize,
    pub last_episode: Option<SummaryFrame>,
}

struct Running {
    cmds: mpsc::Sender<LoopCmd>,
    /// The loop's only pose sender; dropping it ends the episode.
    feed: mpsc::Sender<Pose>,
}

struct Inner {
    core: SessionCore,
    policy: PolicySpec,
    checkpoint: Option<PathBuf>,
    /// Learner carried across human-in-the-loop episodes.
    trainer: Option<Box<Trainer>>,
    run: Option<Running>,
    client: Option<tmpsc::UnboundedSender<Outbound>>,
    attached_once: bool,
    /// Taps of accepted poses; gone once the session closes.
    tap: Option<broadcast::Sender<Arc<str>>>,
    episodes: usize,
    last: Option<SummaryFrame>,
}

/// One operator session: a single websocket client driving episodes one at
/// a time.
pub struct Session {
    pub id: String,
    sc: Scenario,
    home: Pose,
    dir: PathBuf,
    epoch: Instant,
    frame_period: Tick,
    frames: runner::FrameSlot,
    clock_offset: Arc<ClockOffset>,
    inner: Mutex<Inner>,
}

impl Session {
    pub fn create(id: String, req: CreateSession, cfg: &GatewayConfig) -> Result<Arc<Self>, String> {
        let mut sc = match req.scenario {
            Some(ScenarioArg::Path(p)) => Scenario::load(&cfg.scenario_dir.join(p)).map_err(|e| e.to_string())?,
            Some(ScenarioArg::Inline(sc)) => *sc,
            None => Scenario::default(),
        };
        if let Some(seed) = req.seed {
            sc.seed = seed;
        }
        sc.source = SourceSpec::Live;
        sc.validate().map_err(|e| e.to_string())?;
        let chain = sc.chain().map_err(|e| e.to_string())?;
        let home = chain.forward_kinematics(&chain.home()).map_err(|e| e.to_string())?;
        let policy: PolicySpec = req
            .policy
            .as_deref()
            .unwrap_or("zero")
            .parse()
            .map_err(|e: PipelineError| e.to_string())?;
        rl::build_policy(&policy, &sc).map_err(|e| e.to_string())?;
        if let Some(ck) = &req.checkpoint {
            load_checkpoint(ck, &sc)?;
        }
        let min_period = 1000u64.div_ceil(u64::from(cfg.max_frame_hz.max(1)));
        let (frames, _) = watch::channel(None);
        let (tap, _) = broadcast::channel(1024);
        Ok(Arc::new(Self {
            dir: cfg.out_dir.join(&id),
            id,
            home,
            epoch: Instant::now(),
            frame_period: sc.stages.frame_period().max(min_period),
            frames,
            clock_offset: Arc::new(ClockOffset::new()),
            inner: Mutex::new(Inner {
                core: SessionCore::new(cfg.rate_cap_hz),
                policy,
                checkpoint: req.checkpoint,
                trainer: None,
                run: None,
                client: None,
                attached_once: false,
                tap: Some(tap),
                episodes: 0,
                last: None,
            }),
            sc,
        }))
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Server clock: ms since the session was created.
    pub fn now_ms(&self) -> i64 {
        self.epoch.elapsed().as_millis() as i64
    }

    pub fn scenario(&self) -> &Scenario {
        &self.sc
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn state(&self) -> SessionState {
        self.lock().core.state
    }

    pub fn info(&self) -> SessionInfo {
        let g = self.lock();
        SessionInfo {
            id: self.id.clone(),
            state: g.core.state,
            policy: g.policy.to_string(),
            checkpoint: g.checkpoint.as_ref().map(|p| p.display().to_string()),
            counters: g.core.counters,
            clock_offset_ms: g.core.clock.best().map(|s| s.offset_ms),
            episodes: g.episodes,
            last_episode: g.last.clone(),
        }
    }

    /// Claims the operator socket. `None` when a client was already
    /// attached or the session is closed.
    pub fn attach(&self) -> Option<Attachment> {
        let mut g = self.lock();
        if g.attached_once || g.core.state == SessionState::Closed {
            return None;
        }
        let (tx, rx) = tmpsc::unbounded_channel();
        g.client = Some(tx);
        g.attached_once = true;
        let now = self.now_ms();
        g.core.clock.ping(0, now);
        Some(Attachment {
            events: rx,
            frames: self.frames.subscribe(),
            hello: Outbound::Sync {
                seq: 0,
                t_server_ms: now,
            },
        })
    }

    /// The operator socket went away: the session closes and a running
    /// episode ends with its log flushed.
    pub fn detach(&self) {
        let mut g = self.lock();
        g.client = None;
        g.core.state = SessionState::Closed;
        g.tap = None;
        // the loop sees the feed disconnect on its next tick
        g.run = None;
    }

    pub fn subscribe_feed(&self) -> Option<broadcast::Receiver<Arc<str>>> {
        self.lock().tap.as_ref().map(|t| t.subscribe())
    }

    /// Handles one text frame from the operator socket and returns the
    /// direct replies.
    pub fn handle_text(self: &Arc<Self>, text: &str) -> Vec<Outbound> {
        let now = self.now_ms();
        let frame: Inbound = match serde_json::from_str(text) {
            Ok(f) => f,
            Err(e) => {
                let mut g = self.lock();
                g.core.malformed();
                return vec![err(
                    None,
                    ErrCode::Malformed,
                    format!("unreadable frame: {e}"),
                    g.core.state,
                )];
            }
        };
        match frame {
            Inbound::Pose { t_client_ms, p } => self.on_pose(t_client_ms, p, now).into_iter().collect(),
            Inbound::Sync {
                seq,
                t_server_ms,
                t_client_ms,
            } => {
                let mut g = self.lock();
                match g.core.clock.on_reply(seq, t_server_ms, t_client_ms, now) {
                    Some(SyncStep::Again(next)) => {
                        g.core.clock.ping(next, now);
                        vec![Outbound::Sync {
                            seq: next,
                            t_server_ms: now,
                        }]
                    }
                    Some(SyncStep::Done(s)) => {
                        self.clock_offset.set(s.offset_ms);
                        vec![Outbound::Ack {
                            cmd: "sync".into(),
                            state: g.core.state,
                            detail: json!({ "clock_offset_ms": s.offset_ms, "rtt_ms": s.rtt_ms }),
                        }]
                    }
                    None => vec![],
                }
            }
            Inbound::Ctrl { cmd, arg } => vec![self.on_ctrl(cmd, &arg)],
        }
    }

    fn on_pose(&self, t_client_ms: i64, p: [f64; 7], now: i64) -> Option<Outbound> {
        let mut g = self.lock();
        match g.core.ingest(t_client_ms, p, now) {
            Ingest::Accepted(pose) => {
                if let Some(run) = &g.run {
                    // a finished loop has dropped its receiver
                    let _ = run.feed.send(pose);
                }
                if let Some(tap) = &g.tap {
                    let frame =
                        json!({ "type": "pose", "t_client_ms": t_client_ms, "t_server_ms": now, "p": pose.to_array() });
                    let _ = tap.send(frame.to_string().into());
                }
                None
            }
            Ingest::Stale | Ingest::RateLimited { notify: false } => None,
            Ingest::RateLimited { notify: true } => Some(err(
                None,
                ErrCode::RateCap,
                "pose frames exceed the session rate cap; extra frames are dropped".into(),
                g.core.state,
            )),
            Ingest::Invalid(why) => Some(err(None, ErrCode::InvalidPose, why, g.core.state)),
        }
    }

    fn on_ctrl(self: &Arc<Self>, cmd: CtrlCmd, arg: &Value) -> Outbound {
        let mut g = self.lock();
        if let Err(why) = g.core.check(cmd) {
            return err(Some(cmd), ErrCode::IllegalTransition, why, g.core.state);
        }
        let result = match cmd {
            CtrlCmd::Start => self.start(&mut g, EpisodeKind::Run),
            CtrlCmd::StartHitlEpisode => self
                .load_hitl(&mut g, arg)
                .and_then(|()| self.start(&mut g, EpisodeKind::Hitl)),
            CtrlCmd::Stop => {
                if let Some(run) = &g.run {
                    let _ = run.cmds.send(LoopCmd::Stop);
                }
                Ok(json!({ "summary": "follows when the episode has ended" }))
            }
            CtrlCmd::SetPolicy => self.set_policy(&mut g, arg),
        };
        match result {
            Ok(detail) => Outbound::Ack {
                cmd: cmd.name().into(),
                state: g.core.state,
                detail,
            },
            Err(why) => err(Some(cmd), ErrCode::InvalidArgument, why, g.core.state),
        }
    }

    fn set_policy(&self, g: &mut Inner, arg: &Value) -> Result<Value, String> {
        let text = arg
            .as_str()
            .ok_or("set_policy needs a policy string such as \"fixed:60\"")?;
        let spec: PolicySpec = text.parse().map_err(|e: PipelineError| e.to_string())?;
        let policy = rl::build_policy(&spec, &self.sc).map_err(|e| e.to_string())?;
        if let PolicySpec::Checkpoint(p) = &spec {
            g.checkpoint = Some(p.clone());
            g.trainer = None;
        }
        g.policy = spec;
        if let Some(run) = &g.run {
            let _ = run.cmds.send(LoopCmd::SetPolicy(policy));
            return Ok(json!({ "policy": g.policy.to_string(), "effective": "next decision boundary" }));
        }
        Ok(json!({ "policy": g.policy.to_string() }))
    }

    /// Makes sure a learner exists, loading one from the session checkpoint
    /// or from a path given as the argument.
    fn load_hitl(&self, g: &mut Inner, arg: &Value) -> Result<(), String> {
        if let Some(p) = arg.as_str() {
            load_checkpoint(Path::new(p), &self.sc)?;
            g.checkpoint = Some(p.into());
            g.trainer = None;
        }
        if g.trainer.is_some() {
            return Ok(());
        }
        let path = g
            .checkpoint
            .clone()
            .ok_or("no checkpoint is loaded; create the session with one or pass its path")?;
        let ck = load_checkpoint(&path, &self.sc)?;
        let mut tr = Trainer::resume(ck, self.sc.ppo.clone(), self.sc.seed).map_err(|e| e.to_string())?;
        tr.set_phase(Phase::Hitl);
        g.trainer = Some(Box::new(tr));
        Ok(())
    }

    fn start(self: &Arc<Self>, g: &mut Inner, kind: EpisodeKind) -> Result<Value, String> {
        let (driver, duration, state) = match kind {
            EpisodeKind::Run => {
                let policy = rl::build_policy(&g.policy, &self.sc).map_err(|e| e.to_string())?;
                (Driver::Policy(policy), self.sc.duration_ms, SessionState::Running)
            }
            EpisodeKind::Hitl => {
                let tr = g.trainer.take().expect("loaded before start");
                (Driver::Learner(tr), self.sc.ppo.hitl_episode_ms, SessionState::Hitl)
            }
        };
        let episode = g.episodes + 1;
        let (feed_tx, feed_rx) = mpsc::channel();
        let (cmd_tx, cmd_rx) = mpsc::channel();
        let initial = g.core.latest().map_or(self.home, |(_, p)| p);
        let job = Job {
            sc: Scenario {
                duration_ms: duration,
                ..self.sc.clone()
            },
            episode,
            driver,
            source: Box::new(LiveSource::paced(feed_rx, initial)),
            cmds: cmd_rx,
            frames: self.frames.clone(),
            frame_period: self.frame_period,
            epoch: self.epoch,
            clock_offset: Arc::clone(&self.clock_offset),
        };
        let me = Arc::clone(self);
        std::thread::Builder::new()
            .name(format!("episode-{}-{episode}", self.id))
            .spawn(move || {
                let result = runner::run(job);
                me.finish(episode, kind, result);
            })
            .map_err(|e| format!("cannot start the episode loop: {e}"))?;
        g.run = Some(Running {
            cmds: cmd_tx,
            feed: feed_tx,
        });
        g.episodes = episode;
        g.core.state = state;
        Ok(json!({ "episode": episode, "duration_ms": duration }))
    }

    /// Runs on the loop thread once the episode has ended.
    fn finish(&self, episode: usize, kind: EpisodeKind, result: Result<Finished, rl::RlError>) {
        let mut summary = SummaryFrame {
            episode,
            kind,
            ticks: 0,
            policy: String::new(),
            seed: self.sc.seed,
            metrics: None,
            mean_reward: None,
            disconnected: false,
            discarded: false,
            degraded_ticks: 0,
            log_dir: None,
            checkpoint: None,
            error: None,
        };
        let mut trainer = None;
        match result {
            Ok(f) => {
                summary.ticks = f.log.ticks();
                summary.policy = f.log.policy.clone();
                summary.disconnected = f.disconnected;
                summary.degraded_ticks = f.log.degraded_ticks.len();
                let dir = self.dir.join(format!("episode-{episode}"));
                match self.flush(&dir, &f.log) {
                    Ok(m) => summary.metrics = m,
                    Err(e) => summary.error = Some(format!("writing the episode log: {e}")),
                }
                summary.log_dir = Some(dir.display().to_string());
                let Finished {
                    log,
                    driver,
                    last_state,
                    disconnected,
                } = f;
                if let Driver::Learner(mut tr) = driver {
                    match self.learn(&mut tr, &log, &last_state, disconnected) {
                        Ok((reward, ck)) => {
                            summary.mean_reward = reward;
                            summary.discarded = reward.is_none();
                            summary.checkpoint = ck.map(|p| p.display().to_string());
                        }
                        Err(e) => {
                            summary.discarded = true;
                            summary.error = Some(e.to_string());
                        }
                    }
                    trainer = Some(tr);
                }
            }
            Err(e) => {
                log::error!("session {} episode {episode} failed: {e}", self.id);
                summary.error = Some(e.to_string());
            }
        }
        let mut g = self.lock();
        g.run = None;
        if trainer.is_some() {
            g.trainer = trainer;
        }
        if g.core.state != SessionState::Closed {
            g.core.state = SessionState::Idle;
        }
        g.last = Some(summary.clone());
        if let Some(c) = &g.client {
            let _ = c.send(Outbound::Summary(Box::new(summary)));
        }
    }

    /// Writes the log plus a scenario that replays it offline.
    fn flush(&self, dir: &Path, log: &EpisodeLog) -> Result<Option<EpisodeSummary>, String> {
        let metrics = match log.export(dir) {
            Ok(m) => Some(m),
            Err(e) => {
                log::warn!("episode in {} not scored: {e}", dir.display());
                std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
                None
            }
        };
        let replay = Scenario {
            duration_ms: log.ticks(),
            source: SourceSpec::Recorded {
                path: "operator.csv".into(),
            },
            ..self.sc.clone()
        };
        std::fs::write(dir.join("scenario.toml"), replay.to_toml()).map_err(|e| e.to_string())?;
        Ok(metrics)
    }

    /// Closes a training episode. Returns its mean reward, or `None` when it
    /// was discarded, and the checkpoint written.
    fn learn(
        &self,
        tr: &mut Trainer,
        log: &EpisodeLog,
        last: &EnvState,
        disconnected: bool,
    ) -> Result<(Option<f64>, Option<PathBuf>), rl::RlError> {
        if disconnected {
            log::warn!("session {}: operator left mid-episode; discarding it", self.id);
            tr.discard_episode();
            return Ok((None, None));
        }
        let row = tr.end_episode(Some(last), log)?;
        tr.update()?;
        std::fs::create_dir_all(&self.dir)?;
        let path = self.dir.join(checkpoint_file(Phase::Hitl));
        tr.checkpoint().save(&path)?;
        write_curve(&self.dir.join(CURVE_FILE), tr.curve())?;
        Ok((Some(row.mean_reward), Some(path)))
    }
}

pub struct Attachment {
    pub events: tmpsc::UnboundedReceiver<Outbound>,
    pub frames: watch::Receiver<Option<Arc<StateFrame>>>,
    /// First clock-sync ping.
    pub hello: Outbound,
}

fn load_checkpoint(path: &Path, sc: &Scenario) -> Result<Checkpoint, String> {
    let ck = Checkpoint::load(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if ck.header.bounds != sc.horizons {
        return Err(format!(
            "checkpoint horizon bounds {:?} differ from the scenario's {:?}",
            ck.header.bounds, sc.horizons
        ));
    }
    Ok(ck)
}

fn err(cmd: Option<CtrlCmd>, code: ErrCode, message: String, state: SessionState) -> Outbound {
    Outbound::Err {
        cmd: cmd.map(|c| c.name().into()),
        code,
        message,
        state,
    }
}
