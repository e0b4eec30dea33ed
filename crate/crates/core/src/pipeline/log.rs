use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{estimate_effective_lag, total_latency, ChannelCounters, LatencyPath, PipelineError};
use crate::model::{rmse_orientation, rmse_position, AolEvent, Stage, StageStamps, Tick, TraceWindow};

/// Delays the simulator drew for one message at each stage it passed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InjectedDelays {
    pub t_q: Option<Tick>,
    pub t_p: Option<Tick>,
    pub t_o: Option<Tick>,
    pub t_c: Option<Tick>,
    pub t_i: Option<Tick>,
    pub t_l: Option<Tick>,
    /// Ticks between the computed stamp and the capture of the first frame
    /// that showed this message.
    pub frame_wait: Option<Tick>,
    pub t_r: Option<Tick>,
    pub t_v: Option<Tick>,
}

impl InjectedDelays {
    pub fn control_sum(&self) -> Option<Tick> {
        Some(self.t_p? + self.t_o? + self.t_c? + self.t_i? + self.t_l?)
    }

    pub fn render_sum(&self) -> Option<Tick> {
        Some(self.t_p? + self.t_o? + self.t_c? + self.frame_wait? + self.t_r? + self.t_v?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub id: usize,
    pub t_gen: Tick,
    pub stamps: StageStamps,
    /// Horizons used when this sample was forecast.
    pub h_r: Tick,
    pub h_c: Tick,
    pub injected: InjectedDelays,
}

impl MessageRecord {
    pub fn new(id: usize, t_gen: Tick) -> Self {
        let mut stamps = StageStamps::default();
        stamps.set(Stage::Sensed, t_gen);
        Self {
            id,
            t_gen,
            stamps,
            h_r: 0,
            h_c: 0,
            injected: InjectedDelays::default(),
        }
    }

    pub fn control_latency(&self) -> Option<Tick> {
        total_latency(&self.stamps, LatencyPath::Control).ok()
    }

    pub fn render_latency(&self) -> Option<Tick> {
        total_latency(&self.stamps, LatencyPath::Render).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub tick: Tick,
    pub h_r: Tick,
    pub h_c: Tick,
    /// The requested action exceeded a horizon bound.
    pub clamped: bool,
    pub aol: Tick,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelReport {
    pub queue: ChannelCounters,
    pub predict: ChannelCounters,
    pub uplink: ChannelCounters,
    pub compute: ChannelCounters,
    pub interpolate: ChannelCounters,
    pub downlink: ChannelCounters,
    pub render: ChannelCounters,
    pub feedback: ChannelCounters,
}

impl ChannelReport {
    pub fn all(&self) -> [(&'static str, &ChannelCounters); 8] {
        [
            ("queue", &self.queue),
            ("predict", &self.predict),
            ("uplink", &self.uplink),
            ("compute", &self.compute),
            ("interpolate", &self.interpolate),
            ("downlink", &self.downlink),
            ("render", &self.render),
            ("feedback", &self.feedback),
        ]
    }

    pub fn stale_total(&self) -> u64 {
        self.all().iter().map(|(_, c)| c.stale).sum()
    }
}

/// Everything recorded during one episode. The three pose traces share the
/// tick grid `0..ticks`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub scenario: String,
    pub seed: u64,
    pub policy: String,
    /// o(t)
    pub operator: TraceWindow,
    /// m(t), as displayed to the operator.
    pub virtual_pose: TraceWindow,
    /// r(t)
    pub real: TraceWindow,
    pub aol: Vec<Tick>,
    pub aol_events: Vec<AolEvent>,
    pub decisions: Vec<DecisionRecord>,
    pub messages: Vec<MessageRecord>,
    pub channels: ChannelReport,
    /// Computed messages replaced by a newer one before their control packet
    /// or first frame went out.
    pub superseded: u64,
    pub ik_unconverged: u64,
    /// Real-arm steps whose setpoint hit a joint limit.
    pub joint_clamps: u64,
    /// Actions that exceeded a horizon bound.
    pub action_clamps: u64,
    /// Live mode: ticks run late against the wall clock.
    pub degraded_ticks: Vec<Tick>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub rmse_p_om: f64,
    pub rmse_p_mr: f64,
    pub rmse_o_om: f64,
    pub rmse_o_mr: f64,
    pub mean_aol: f64,
    /// Operator → displayed virtual pose; `None` when undefined.
    pub effective_lag_ms: Option<i64>,
    pub drop_count: u64,
}

/// Rows of `messages.csv`.
#[derive(Serialize)]
struct MessageRow {
    id: usize,
    t_gen: Tick,
    h_r: Tick,
    h_c: Tick,
    sensed: Option<Tick>,
    queued: Option<Tick>,
    predicted: Option<Tick>,
    sent: Option<Tick>,
    received: Option<Tick>,
    computed: Option<Tick>,
    interpolated: Option<Tick>,
    delivered: Option<Tick>,
    rendered: Option<Tick>,
    displayed: Option<Tick>,
    control_latency: Option<Tick>,
    render_latency: Option<Tick>,
}

impl EpisodeLog {
    pub fn ticks(&self) -> Tick {
        self.aol.len() as Tick
    }

    /// Default search range for the effective-lag estimate.
    pub fn lag_search_range(&self) -> Tick {
        (self.ticks() / 4).min(400)
    }

    pub fn effective_lag(&self) -> Result<i64, PipelineError> {
        estimate_effective_lag(&self.operator, &self.virtual_pose, self.lag_search_range())
    }

    /// Messages with both branches complete.
    pub fn complete_messages(&self) -> impl Iterator<Item = &MessageRecord> {
        self.messages
            .iter()
            .filter(|m| m.control_latency().is_some() && m.render_latency().is_some())
    }

    pub fn summary(&self) -> Result<EpisodeSummary, PipelineError> {
        let mean_aol = if self.aol.is_empty() {
            0.0
        } else {
            self.aol.iter().sum::<Tick>() as f64 / self.aol.len() as f64
        };
        let effective_lag_ms = match self.effective_lag() {
            Ok(l) => Some(l),
            Err(PipelineError::UndefinedLag(why)) => {
                log::debug!("effective lag undefined: {why}");
                None
            }
            Err(e) => return Err(e),
        };
        Ok(EpisodeSummary {
            rmse_p_om: rmse_position(&self.operator, &self.virtual_pose)?,
            rmse_p_mr: rmse_position(&self.virtual_pose, &self.real)?,
            rmse_o_om: rmse_orientation(&self.operator, &self.virtual_pose)?,
            rmse_o_mr: rmse_orientation(&self.virtual_pose, &self.real)?,
            mean_aol,
            effective_lag_ms,
            drop_count: self.channels.stale_total(),
        })
    }

    /// Writes the traces, per-message lineage, decisions and summary as
    /// CSV/JSON files into `dir`.
    pub fn export(&self, dir: &Path) -> Result<EpisodeSummary, PipelineError> {
        std::fs::create_dir_all(dir)?;
        let create = |name: &str| -> Result<BufWriter<File>, PipelineError> {
            Ok(BufWriter::new(File::create(dir.join(name))?))
        };
        self.operator.write_csv(create("operator.csv")?)?;
        self.virtual_pose.write_csv(create("virtual.csv")?)?;
        self.real.write_csv(create("real.csv")?)?;

        let mut w = csv::Writer::from_writer(create("aol.csv")?);
        w.write_record(["tick", "aol"])?;
        for (t, a) in self.aol.iter().enumerate() {
            w.write_record([t.to_string(), a.to_string()])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_writer(create("decisions.csv")?);
        for d in &self.decisions {
            w.serialize(d)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_writer(create("messages.csv")?);
        for m in &self.messages {
            let s = |st| m.stamps.get(st);
            w.serialize(MessageRow {
                id: m.id,
                t_gen: m.t_gen,
                h_r: m.h_r,
                h_c: m.h_c,
                sensed: s(Stage::Sensed),
                queued: s(Stage::Queued),
                predicted: s(Stage::Predicted),
                sent: s(Stage::Sent),
                received: s(Stage::Received),
                computed: s(Stage::Computed),
                interpolated: s(Stage::Interpolated),
                delivered: s(Stage::Delivered),
                rendered: s(Stage::Rendered),
                displayed: s(Stage::Displayed),
                control_latency: m.control_latency(),
                render_latency: m.render_latency(),
            })?;
        }
        w.flush()?;

        let summary = self.summary()?;
        let mut f = create("summary.json")?;
        serde_json::to_writer_pretty(&mut f, &summary)?;
        f.write_all(b"\n")?;
        let mut f = create("channels.json")?;
        serde_json::to_writer_pretty(&mut f, &self.channels)?;
        f.write_all(b"\n")?;
        f.flush()?;
        Ok(summary)
    }
}
