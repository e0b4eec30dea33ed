//! Delay channels, latency accounting and the closed-loop episode runner.
//!
//! A pose sampled at the operator travels
//! `sensed → queued → predicted/sent → received → computed`, then forks into
//! the control branch (`interpolated → delivered` at the real arm) and the
//! render branch (`rendered → displayed` back at the operator).

mod delay;
mod lag;
mod log;
mod policy;
mod sim;
mod source;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use delay::{ChannelCounters, DelayChannel, DelayKind, DelayModel, DelaySampler, Delivery, Generated};
pub use lag::{estimate_effective_lag, total_latency, LatencyPath};
pub use log::{ChannelReport, DecisionRecord, EpisodeLog, EpisodeSummary, InjectedDelays, MessageRecord};
pub use policy::{EnvAction, EnvState, FixedPolicy, HorizonPolicy, OraclePolicy, PolicySpec, ZeroPolicy};
pub use sim::{run_episode, Simulator, StateSnapshot};
pub use source::{
    Lissajous, LissajousSpec, LiveSource, MinJerkSpec, MinimumJerk, Pacer, Recorded, Scripted, SourceSpec,
    TrajectorySource,
};

use crate::control::{ControlError, ControllerConfig};
use crate::kinematics::{IkParams, KinematicsError, SerialChain};
use crate::model::{ModelError, Tick};
use crate::predictor::{ArmaConfig, PredictorError};
use crate::rl::{PpoConfig, RewardWeights};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("invalid scenario: {0}")]
    Validation(String),
    #[error("lineage incomplete: missing `{0}` stamp")]
    IncompleteLineage(&'static str),
    #[error("effective lag undefined: {0}")]
    UndefinedLag(String),
    #[error("episode already finished")]
    Finished,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Predictor(#[from] PredictorError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Per-stage delays. Fixed stages are whole ticks; the three network links
/// are [`DelayModel`]s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageBudget {
    /// Sampling period of the operator device.
    pub t_s: Tick,
    pub t_q: Tick,
    pub t_p: Tick,
    /// Operator → Metaverse.
    pub t_o: DelayModel,
    pub t_c: Tick,
    pub t_i: Tick,
    pub t_r: Tick,
    /// Metaverse → operator (rendered state).
    pub t_v: DelayModel,
    /// Metaverse → real arm.
    pub t_l: DelayModel,
    /// Physics step of the virtual arms.
    pub t_si: Tick,
    /// Sampling periods per rendered frame.
    pub t_im: Tick,
}

impl Default for StageBudget {
    fn default() -> Self {
        Self {
            t_s: 1,
            t_q: 0,
            t_p: 0,
            t_o: DelayModel::gaussian(75.0, 12.5),
            t_c: 0,
            t_i: 0,
            t_r: 0,
            t_v: DelayModel::constant(0),
            t_l: DelayModel::constant(0),
            t_si: 1,
            t_im: 1,
        }
    }
}

impl StageBudget {
    /// All stages zero except a constant uplink delay of `d` ticks, which both
    /// branches share.
    pub fn shared_constant(d: Tick) -> Self {
        Self {
            t_o: DelayModel::constant(d),
            ..Self::default()
        }
    }

    pub fn frame_period(&self) -> Tick {
        self.t_s * self.t_im
    }

    /// Expected control-branch total.
    pub fn expected_control_ms(&self) -> f64 {
        (self.t_p + self.t_c + self.t_i) as f64 + self.t_o.expected_ms() + self.t_l.expected_ms()
    }

    /// Expected render-branch total.
    pub fn expected_render_ms(&self) -> f64 {
        (self.t_p + self.t_c + self.t_r) as f64 + self.t_o.expected_ms() + self.t_v.expected_ms()
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.t_s == 0 || self.t_si == 0 || self.t_im == 0 {
            return Err(PipelineError::Validation("t_s, t_si and t_im must be positive".into()));
        }
        self.t_o.validate("t_o")?;
        self.t_v.validate("t_v")?;
        self.t_l.validate("t_l")
    }
}

/// Box the operator is expected to move in; used to normalize observations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Default for Workspace {
    /// Centered on the UR3e home end-effector position.
    fn default() -> Self {
        Self {
            min: [0.05, -0.05, 0.1],
            max: [0.55, 0.45, 0.6],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HorizonBounds {
    pub h_r_max: Tick,
    pub h_c_max: Tick,
}

impl Default for HorizonBounds {
    fn default() -> Self {
        Self {
            h_r_max: 200,
            h_c_max: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub name: String,
    pub seed: u64,
    pub duration_ms: Tick,
    pub decision_interval_ms: Tick,
    pub stages: StageBudget,
    pub predictor: ArmaConfig,
    pub controller: ControllerConfig,
    pub ik: IkParams,
    /// Chain description file; the built-in UR3e table when absent.
    pub chain: Option<std::path::PathBuf>,
    pub source: SourceSpec,
    pub workspace: Workspace,
    pub horizons: HorizonBounds,
    pub reward: RewardWeights,
    pub ppo: PpoConfig,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            name: "default".into(),
            seed: 0,
            duration_ms: 30_000,
            decision_interval_ms: 50,
            stages: StageBudget::default(),
            predictor: ArmaConfig::default(),
            controller: ControllerConfig::default(),
            ik: IkParams::default(),
            chain: None,
            source: SourceSpec::default(),
            workspace: Workspace::default(),
            horizons: HorizonBounds::default(),
            reward: RewardWeights::default(),
            ppo: PpoConfig::default(),
        }
    }
}

impl Scenario {
    /// Reads a `.toml` or `.json` scenario; relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("cannot read {}: {e}", path.display())))?;
        let mut s = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text)?,
            _ => Self::from_toml(&text)?,
        };
        if let Some(dir) = path.parent() {
            s.resolve_paths(dir);
        }
        s.validate()?;
        Ok(s)
    }

    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Validation(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(|e| PipelineError::Validation(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("scenario serializes")
    }

    fn resolve_paths(&mut self, dir: &Path) {
        if let Some(c) = &self.chain {
            if c.is_relative() {
                self.chain = Some(dir.join(c));
            }
        }
        if let SourceSpec::Recorded { path } = &mut self.source {
            if path.is_relative() {
                *path = dir.join(&*path);
            }
        }
    }

    pub fn chain(&self) -> Result<SerialChain, PipelineError> {
        match &self.chain {
            Some(p) => Ok(SerialChain::load(p)?),
            None => Ok(SerialChain::ur3e()),
        }
    }

    /// Operator samples kept for fitting.
    pub fn window_samples(&self) -> usize {
        (self.predictor.window_ms / self.stages.t_s).max(1) as usize
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Validation(m));
        if self.duration_ms == 0 {
            return bad("duration_ms must be positive".into());
        }
        self.stages.validate()?;
        if self.decision_interval_ms == 0 || self.decision_interval_ms < self.stages.t_s {
            return bad(format!(
                "decision interval {} ms is shorter than the sampling period {} ms",
                self.decision_interval_ms, self.stages.t_s
            ));
        }
        self.predictor.validate()?;
        self.controller.validate()?;
        let h_max = self.horizons.h_r_max.max(self.horizons.h_c_max);
        if h_max.div_ceil(self.stages.t_s) > self.predictor.max_horizon {
            return bad(format!(
                "horizon bound {h_max} ms exceeds the predictor maximum of {} samples",
                self.predictor.max_horizon
            ));
        }
        if (0..3).any(|i| !(self.workspace.min[i] < self.workspace.max[i])) {
            return bad("workspace min must be below max on every axis".into());
        }
        if !(self.ik.lambda > 0.0) || self.ik.max_iters == 0 {
            return bad("ik lambda and max_iters must be positive".into());
        }
        self.ppo.validate().map_err(PipelineError::Validation)?;
        self.reward.validate().map_err(PipelineError::Validation)?;
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
