//! The episode loop. Runs on its own thread at wall-clock pace and talks to
//! the network side only through channels, so a slow client never holds up
//! a tick.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::Receiver;
use std::sync::Arc;
use std::time::Instant;

use telesync_core::model::{rmse_orientation, rmse_position, Tick};
use telesync_core::pipeline::{EnvState, EpisodeLog, HorizonPolicy, Scenario, Simulator, TrajectorySource};
use telesync_core::rl::{interval_reward, RlError, Trainer};
use tokio::sync::watch;

use crate::wire::{ArmState, RenderLatency, RmseSet, StateFrame};

pub(crate) type FrameSlot = watch::Sender<Option<Arc<StateFrame>>>;

pub(crate) enum LoopCmd {
    /// Takes effect at the next decision boundary.
    SetPolicy(Box<dyn HorizonPolicy>),
    Stop,
}

/// Who picks the horizons.
pub(crate) enum Driver {
    Policy(Box<dyn HorizonPolicy>),
    /// Samples from the learner and records one transition per decision.
    Learner(Box<Trainer>),
}

pub(crate) struct Job {
    pub sc: Scenario,
    pub episode: usize,
    pub driver: Driver,
    pub source: Box<dyn TrajectorySource>,
    pub cmds: Receiver<LoopCmd>,
    pub frames: FrameSlot,
    pub frame_period: Tick,
    pub epoch: Instant,
    pub clock_offset: Arc<ClockOffset>,
}

/// Client clock offset shared with the loop; NaN until the handshake ends.
#[derive(Debug)]
pub(crate) struct ClockOffset(AtomicU64);

impl ClockOffset {
    pub fn new() -> Self {
        Self(AtomicU64::new(f64::NAN.to_bits()))
    }

    pub fn set(&self, ms: f64) {
        self.0.store(ms.to_bits(), Ordering::Relaxed);
    }

    pub fn get(&self) -> Option<f64> {
        Some(f64::from_bits(self.0.load(Ordering::Relaxed))).filter(|v| !v.is_nan())
    }
}

pub(crate) struct Finished {
    pub log: EpisodeLog,
    pub driver: Driver,
    /// State after the last transition, for bootstrapping.
    pub last_state: EnvState,
    pub disconnected: bool,
}

pub(crate) fn run(job: Job) -> Result<Finished, RlError> {
    let Job {
        sc,
        episode,
        mut driver,
        source,
        cmds,
        frames,
        frame_period,
        epoch,
        clock_offset,
    } = job;
    let mut sim = Simulator::new(&sc, source)?;
    let mut labels: Vec<String> = Vec::new();
    if let Driver::Policy(p) = &driver {
        labels.push(p.label());
    }
    // learner transition awaiting its reward, with the tick it started
    let mut open = None;

    loop {
        for cmd in cmds.try_iter() {
            match cmd {
                LoopCmd::Stop => sim.stop(),
                LoopCmd::SetPolicy(p) => {
                    if let Driver::Policy(cur) = &mut driver {
                        labels.push(p.label());
                        *cur = p;
                    }
                }
            }
        }
        if sim.is_finished() {
            break;
        }
        if sim.at_decision_boundary() {
            let state = sim.observe();
            match &mut driver {
                Driver::Policy(p) => {
                    sim.decide(p.decide(&state))?;
                }
                Driver::Learner(tr) => {
                    if let Some((s, start)) = open.take() {
                        tr.record(&s, interval_reward(sim.log(), start, sim.now(), &sc.reward)?);
                    }
                    let s = tr.sample(&state);
                    sim.decide(s.action)?;
                    open = Some((s, sim.now()));
                }
            }
        }
        sim.step()?;
        if sim.now() % frame_period == 0 || sim.is_finished() {
            frames.send_replace(Some(Arc::new(state_frame(&sim, episode, epoch, clock_offset.get()))));
        }
    }

    if let (Driver::Learner(tr), Some((s, start))) = (&mut driver, open) {
        if sim.now() > start {
            tr.record(&s, interval_reward(sim.log(), start, sim.now(), &sc.reward)?);
        }
    }
    let last_state = sim.observe();
    let disconnected = sim.source_disconnected();
    let mut log = sim.finish();
    labels.dedup();
    log.policy = match &driver {
        Driver::Policy(_) => labels.join(" then "),
        Driver::Learner(tr) => format!("learned:{}", tr.phase().label()),
    };
    Ok(Finished {
        log,
        driver,
        last_state,
        disconnected,
    })
}

/// Trailing window for the RMSE shown live.
const RMSE_WINDOW: Tick = 1000;

fn state_frame(sim: &Simulator, episode: usize, epoch: Instant, clock_offset_ms: Option<f64>) -> StateFrame {
    let s = sim.snapshot();
    let log = sim.log();
    let end = sim.now();
    let start = end.saturating_sub(RMSE_WINDOW);
    let (o, m, r) = (
        log.operator.slice(start, end),
        log.virtual_pose.slice(start, end),
        log.real.slice(start, end),
    );
    let rmse = RmseSet {
        p_om: rmse_position(&o, &m).unwrap_or(0.0),
        p_mr: rmse_position(&m, &r).unwrap_or(0.0),
        o_om: rmse_orientation(&o, &m).unwrap_or(0.0),
        o_mr: rmse_orientation(&m, &r).unwrap_or(0.0),
    };
    let render_latency = log
        .messages
        .iter()
        .rev()
        .find(|m| m.render_latency().is_some())
        .map(|m| {
            let d = &m.injected;
            RenderLatency {
                t_gen: m.t_gen,
                t_p: d.t_p,
                t_o: d.t_o,
                t_c: d.t_c,
                frame_wait: d.frame_wait,
                t_r: d.t_r,
                t_v: d.t_v,
                total: d.render_sum(),
            }
        });
    StateFrame {
        episode,
        tick: s.tick,
        t_server_ms: epoch.elapsed().as_millis() as i64,
        clock_offset_ms,
        operator: s.operator.to_array(),
        virtual_arm: ArmState {
            q: s.virtual_q,
            pose: s.virtual_pose.to_array(),
        },
        displayed: s.displayed.to_array(),
        real: ArmState {
            q: s.real_q,
            pose: s.real_pose.to_array(),
        },
        predicted_r: s.predicted_r.to_array(),
        predicted_c: s.predicted_c.to_array(),
        aol_ms: s.aol,
        h_r: s.horizons.h_r,
        h_c: s.horizons.h_c,
        rmse,
        render_latency,
        degraded_ticks: log.degraded_ticks.len(),
    }
}
