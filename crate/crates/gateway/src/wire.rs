//! JSON frames exchanged over the operator socket.
//!
//! Every frame is an object with a `type` field. Poses travel as
//! `[px, py, pz, qx, qy, qz, qw]` arrays.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use telesync_core::model::Tick;
use telesync_core::pipeline::EpisodeSummary;

/// Client → server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Inbound {
    /// One operator sample, stamped with the client's clock.
    Pose { t_client_ms: i64, p: [f64; 7] },
    Ctrl {
        cmd: CtrlCmd,
        #[serde(default, skip_serializing_if = "Value::is_null")]
        arg: Value,
    },
    /// Echo of a server `sync` frame with the client's receive time.
    Sync {
        seq: u32,
        t_server_ms: i64,
        t_client_ms: i64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtrlCmd {
    Start,
    Stop,
    SetPolicy,
    StartHitlEpisode,
}

impl CtrlCmd {
    pub fn name(self) -> &'static str {
        match self {
            CtrlCmd::Start => "start",
            CtrlCmd::Stop => "stop",
            CtrlCmd::SetPolicy => "set_policy",
            CtrlCmd::StartHitlEpisode => "start_hitl_episode",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Idle,
    /// An episode under a fixed policy is running.
    Running,
    /// A human-in-the-loop training episode is running.
    Hitl,
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrCode {
    /// Not valid JSON, or not a known frame.
    Malformed,
    /// A pose that is not a usable pose.
    InvalidPose,
    /// Pose frames arrive faster than the session accepts them.
    RateCap,
    /// The command is not allowed in the current state.
    IllegalTransition,
    /// The command's argument was rejected.
    InvalidArgument,
    Internal,
}

/// Server → client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Outbound {
    State(Box<StateFrame>),
    Ack {
        cmd: String,
        state: SessionState,
        #[serde(default, skip_serializing_if = "Value::is_null")]
        detail: Value,
    },
    Err {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cmd: Option<String>,
        code: ErrCode,
        message: String,
        state: SessionState,
    },
    Sync {
        seq: u32,
        t_server_ms: i64,
    },
    Summary(Box<SummaryFrame>),
}

impl Outbound {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("wire frames serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmState {
    pub q: Vec<f64>,
    pub pose: [f64; 7],
}

/// Position RMSE in meters, orientation RMSE as quaternion distance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RmseSet {
    pub p_om: f64,
    pub p_mr: f64,
    pub o_om: f64,
    pub o_mr: f64,
}

/// Injected render-path delays of the newest displayed message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderLatency {
    pub t_gen: Tick,
    pub t_p: Option<Tick>,
    pub t_o: Option<Tick>,
    pub t_c: Option<Tick>,
    pub frame_wait: Option<Tick>,
    pub t_r: Option<Tick>,
    pub t_v: Option<Tick>,
    pub total: Option<Tick>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateFrame {
    pub episode: usize,
    /// Last simulated tick.
    pub tick: Tick,
    /// Server clock, ms since the session was created.
    pub t_server_ms: i64,
    /// Client clock minus server clock, once the handshake has finished;
    /// `t_server_ms + clock_offset_ms` is the frame time on the client clock.
    pub clock_offset_ms: Option<f64>,
    pub operator: [f64; 7],
    #[serde(rename = "virtual")]
    pub virtual_arm: ArmState,
    /// Virtual pose as currently shown to the operator.
    pub displayed: [f64; 7],
    pub real: ArmState,
    pub predicted_r: [f64; 7],
    pub predicted_c: [f64; 7],
    pub aol_ms: Tick,
    pub h_r: Tick,
    pub h_c: Tick,
    /// Over the last second of the episode.
    pub rmse: RmseSet,
    pub render_latency: Option<RenderLatency>,
    pub degraded_ticks: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeKind {
    Run,
    Hitl,
}

/// Sent once an episode has ended and its logs are written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryFrame {
    pub episode: usize,
    pub kind: EpisodeKind,
    pub ticks: Tick,
    pub policy: String,
    pub seed: u64,
    /// `None` when the episode was too short to score.
    pub metrics: Option<EpisodeSummary>,
    /// Mean per-decision reward of a training episode.
    pub mean_reward: Option<f64>,
    /// The operator went away before the episode ended.
    pub disconnected: bool,
    /// A training episode that did not count towards the learner.
    pub discarded: bool,
    pub degraded_ticks: usize,
    pub log_dir: Option<String>,
    pub checkpoint: Option<String>,
    pub error: Option<String>,
}
