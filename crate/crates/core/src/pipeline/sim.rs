use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::log::{DecisionRecord, EpisodeLog, MessageRecord};
use super::policy::{EnvAction, EnvState, HorizonPolicy};
use super::{
    mix_seed, ChannelReport, DelayChannel, DelayModel, Generated, Pacer, PipelineError, Scenario, TrajectorySource,
};
use crate::control::{
    advance_virtual_arm, interpolate_commands, smooth_command, step_real_arm, ControllerGains, RealArmModel,
    SmootherState,
};
use crate::kinematics::{JointState, SerialChain};
use crate::model::{AolTracker, Pose, Stage, Tick, TraceWindow, TICK_SECONDS};
use crate::predictor::{fit, ArmaStream, SampleQueue};

#[derive(Debug, Clone)]
struct SampleMsg {
    id: usize,
    t_gen: Tick,
    pose: Pose,
}

#[derive(Debug, Clone)]
struct PoseMsg {
    id: usize,
    t_gen: Tick,
    pred_c: Pose,
    pred_r: Pose,
}

#[derive(Debug, Clone)]
struct ControlPacket {
    id: usize,
    t_gen: Tick,
    setpoints: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Frame {
    capture: Tick,
    msg: Option<usize>,
    pose: Pose,
    rendered: Tick,
}

impl Generated for SampleMsg {
    fn t_gen(&self) -> Tick {
        self.t_gen
    }
}

impl Generated for PoseMsg {
    fn t_gen(&self) -> Tick {
        self.t_gen
    }
}

impl Generated for ControlPacket {
    fn t_gen(&self) -> Tick {
        self.t_gen
    }
}

impl Generated for Frame {
    fn t_gen(&self) -> Tick {
        self.capture
    }
}

/// Everything a live client needs to draw one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub tick: Tick,
    pub operator: Pose,
    /// Metaverse-side virtual arm.
    pub virtual_q: Vec<f64>,
    pub virtual_pose: Pose,
    /// Virtual pose as last displayed to the operator.
    pub displayed: Pose,
    pub real_q: Vec<f64>,
    pub real_pose: Pose,
    pub predicted_r: Pose,
    pub predicted_c: Pose,
    pub aol: Tick,
    pub horizons: EnvAction,
}

/// Fixed-step closed loop: operator → predictor → uplink → Metaverse, then
/// Metaverse → real arm and Metaverse → operator display.
///
/// Stepped one tick at a time or one decision interval at a time.
pub struct Simulator {
    sc: Scenario,
    chain: SerialChain,
    limits: Vec<(f64, f64)>,
    gains: ControllerGains,
    source: Box<dyn TrajectorySource>,
    first_pose: Option<Pose>,
    last_operator: Pose,
    now: Tick,
    end: Tick,
    pacer: Option<Pacer>,

    queue: SampleQueue,
    /// Forecaster of the current model and the newest sample it has seen.
    stream: Option<(ArmaStream, Tick)>,
    action: EnvAction,
    refit_pending: bool,

    q_stage: DelayChannel<SampleMsg>,
    p_stage: DelayChannel<PoseMsg>,
    uplink: DelayChannel<PoseMsg>,
    c_stage: DelayChannel<PoseMsg>,
    i_stage: DelayChannel<ControlPacket>,
    downlink: DelayChannel<ControlPacket>,
    r_stage: DelayChannel<Frame>,
    feedback: DelayChannel<Frame>,

    render_arm: JointState,
    control_arm: JointState,
    render_target: Vec<f64>,
    control_target: Vec<f64>,
    render_msg: Option<usize>,
    render_captured: bool,
    pending_control: Option<usize>,
    smoother: SmootherState,
    last_cmd: Vec<f64>,
    last_packet: Tick,

    real: RealArmModel,
    setpoints: VecDeque<Vec<f64>>,
    real_target: Vec<f64>,
    aol: AolTracker,
    displayed: Pose,
    predicted: (Pose, Pose),
    log: EpisodeLog,
}

fn fixed(t: Tick) -> DelayModel {
    DelayModel::constant(t)
}

/// Network link with latest-state semantics; its RNG mixes the run seed
/// with the model's own seed and runs on a per-link stream.
fn network<M: Generated>(m: &DelayModel, run_seed: u64, stream: u64) -> DelayChannel<M> {
    let m = m.clone().with_seed(mix_seed(run_seed, m.seed));
    DelayChannel::new(m, stream, true)
}

impl Simulator {
    /// Builds the source from the scenario's spec.
    pub fn from_scenario(sc: &Scenario) -> Result<Self, PipelineError> {
        let chain = sc.chain()?;
        let home = chain.forward_kinematics(&chain.home())?;
        let source = sc.source.build(&home, sc.seed, None)?;
        Self::new(sc, source)
    }

    pub fn new(sc: &Scenario, mut source: Box<dyn TrajectorySource>) -> Result<Self, PipelineError> {
        sc.validate()?;
        let chain = sc.chain()?;
        let limits = chain.limits();
        let b = &sc.stages;

        let first = source.pose_at(0);
        let ik0 = chain.ik_dls(&first, &chain.home(), &sc.ik)?;
        if !ik0.converged {
            log::warn!(
                "initial operator pose is not reachable exactly (residual {:.2e} m)",
                ik0.position_error
            );
        }
        let q0 = ik0.q;
        let displayed = chain.forward_kinematics(&q0)?;
        let mut log = EpisodeLog {
            scenario: sc.name.clone(),
            seed: sc.seed,
            operator: TraceWindow::with_capacity(sc.duration_ms as usize),
            virtual_pose: TraceWindow::with_capacity(sc.duration_ms as usize),
            real: TraceWindow::with_capacity(sc.duration_ms as usize),
            ..EpisodeLog::default()
        };
        log.aol.reserve(sc.duration_ms as usize);
        Ok(Self {
            gains: sc.controller.gains(),
            queue: SampleQueue::new(sc.window_samples()),
            stream: None,
            action: EnvAction::default(),
            refit_pending: false,
            q_stage: DelayChannel::new(fixed(b.t_q), 0, false),
            p_stage: DelayChannel::new(fixed(b.t_p), 0, false),
            uplink: network(&b.t_o, sc.seed, 1),
            c_stage: DelayChannel::new(fixed(b.t_c), 0, false),
            i_stage: DelayChannel::new(fixed(b.t_i), 0, false),
            downlink: network(&b.t_l, sc.seed, 2),
            r_stage: DelayChannel::new(fixed(b.t_r), 0, false),
            feedback: network(&b.t_v, sc.seed, 3),
            render_arm: JointState::at_rest(q0.clone()),
            control_arm: JointState::at_rest(q0.clone()),
            render_target: q0.clone(),
            control_target: q0.clone(),
            render_msg: None,
            render_captured: true,
            pending_control: None,
            smoother: SmootherState::new(sc.controller.smoother_duration_ms, sc.controller.discontinuity_rad, 0)?,
            last_cmd: q0.clone(),
            last_packet: 0,
            real: RealArmModel::new(q0.clone(), &sc.controller.real_arm, limits.clone()),
            setpoints: VecDeque::new(),
            real_target: q0,
            aol: AolTracker::new(),
            displayed,
            predicted: (first, first),
            log,
            first_pose: Some(first),
            last_operator: first,
            now: 0,
            end: sc.duration_ms,
            pacer: source.wall_clock().then(|| Pacer::start(Pacer::DEFAULT_SLACK)),
            source,
            limits,
            chain,
            sc: sc.clone(),
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.sc
    }

    pub fn chain(&self) -> &SerialChain {
        &self.chain
    }

    /// Next tick to be simulated.
    pub fn now(&self) -> Tick {
        self.now
    }

    pub fn is_finished(&self) -> bool {
        self.now >= self.end
    }

    /// The operator feed went away before the episode's planned end.
    pub fn source_disconnected(&self) -> bool {
        self.source.disconnected()
    }

    pub fn horizons(&self) -> EnvAction {
        self.action
    }

    pub fn log(&self) -> &EpisodeLog {
        &self.log
    }

    pub fn at_decision_boundary(&self) -> bool {
        self.now % self.sc.decision_interval_ms == 0
    }

    /// Normalized observation for the horizon agent.
    pub fn observe(&self) -> EnvState {
        let ws = &self.sc.workspace;
        let mut pose = self.last_operator.to_array();
        let mut clamped = false;
        for i in 0..3 {
            let v = 2.0 * (pose[i] - ws.min[i]) / (ws.max[i] - ws.min[i]) - 1.0;
            let c = v.clamp(-1.0, 1.0);
            clamped |= c != v;
            pose[i] = c;
        }
        EnvState {
            pose,
            aol: self.aol.current(),
            tick: self.now,
            clamped,
        }
    }

    /// Installs the horizons for the interval starting now, clamping them to
    /// the configured bounds. Returns whether clamping occurred.
    pub fn decide(&mut self, action: EnvAction) -> Result<bool, PipelineError> {
        if self.is_finished() {
            return Err(PipelineError::Finished);
        }
        let bounds = self.sc.horizons;
        let applied = EnvAction {
            h_r: action.h_r.min(bounds.h_r_max),
            h_c: action.h_c.min(bounds.h_c_max),
        };
        let clamped = applied != action;
        if clamped {
            self.log.action_clamps += 1;
        }
        self.log.decisions.push(DecisionRecord {
            tick: self.now,
            h_r: applied.h_r,
            h_c: applied.h_c,
            clamped,
            aol: self.aol.current(),
        });
        self.action = applied;
        self.refit_pending = true;
        Ok(clamped)
    }

    /// Applies `action` and runs until the next decision boundary or the end
    /// of the episode. Returns the ticks simulated, `[start, end)`.
    pub fn run_interval(&mut self, action: EnvAction) -> Result<(Tick, Tick), PipelineError> {
        self.decide(action)?;
        self.advance_interval()
    }

    /// Runs under the installed horizons until the next decision boundary or
    /// the end of the episode.
    pub fn advance_interval(&mut self) -> Result<(Tick, Tick), PipelineError> {
        if self.is_finished() {
            return Err(PipelineError::Finished);
        }
        let start = self.now;
        loop {
            self.step()?;
            if self.is_finished() || self.at_decision_boundary() {
                break;
            }
        }
        Ok((start, self.now))
    }

    /// Ends the episode at the current tick.
    pub fn stop(&mut self) {
        self.end = self.now;
    }

    /// Marks the tick about to run as late against the wall clock.
    pub fn mark_degraded(&mut self) {
        self.log.degraded_ticks.push(self.now);
    }

    pub fn snapshot(&self) -> StateSnapshot {
        let fk = |q: &[f64]| self.chain.forward_kinematics(q).unwrap_or_default();
        StateSnapshot {
            tick: self.now.saturating_sub(1),
            operator: self.last_operator,
            virtual_q: self.render_arm.q.clone(),
            virtual_pose: fk(&self.render_arm.q),
            displayed: self.displayed,
            real_q: self.real.state.q.clone(),
            real_pose: fk(&self.real.state.q),
            predicted_r: self.predicted.1,
            predicted_c: self.predicted.0,
            aol: self.aol.current(),
            horizons: self.action,
        }
    }

    /// Closes the log: channel counters are captured as they stand.
    pub fn finish(mut self) -> EpisodeLog {
        self.log.channels = self.channel_report();
        self.log
    }

    pub fn channel_report(&self) -> ChannelReport {
        ChannelReport {
            queue: self.q_stage.counters(),
            predict: self.p_stage.counters(),
            uplink: self.uplink.counters(),
            compute: self.c_stage.counters(),
            interpolate: self.i_stage.counters(),
            downlink: self.downlink.counters(),
            render: self.r_stage.counters(),
            feedback: self.feedback.counters(),
        }
    }

    fn stamp(&mut self, id: usize, stage: Stage, now: Tick) {
        let rec = &mut self.log.messages[id];
        rec.stamps.set(stage, now);
        debug_assert!(
            rec.stamps.is_monotone(),
            "stamp {stage:?} out of order for message {id}"
        );
    }

    fn refit(&mut self) {
        self.refit_pending = false;
        self.stream = None;
        if self.action.h_r == 0 && self.action.h_c == 0 {
            return;
        }
        let window = self.queue.poses();
        let t_gen = self.queue.newest().map_or(0, |s| s.t_gen);
        match fit(&window, &self.sc.predictor) {
            Ok(m) => {
                // the innovations only need the same warm-up as a batch forecast
                let tail = window.len().saturating_sub(m.tail_len());
                let mut st = ArmaStream::new(m);
                st.extend(&window[tail..]);
                self.stream = Some((st, t_gen));
            }
            Err(e) => log::debug!("tick {}: no model ({e}), holding the latest sample", self.now),
        }
    }

    /// Brings the forecaster up to `t_gen` and reads both horizons. Samples
    /// are forecast in generation order; an older one rebuilds the stream.
    fn forecast(&mut self, msg: &SampleMsg) -> (Pose, Pose) {
        let a = self.action;
        let hold = (msg.pose, msg.pose);
        let Some((stream, seen)) = &mut self.stream else {
            return hold;
        };
        if *seen > msg.t_gen {
            let model = stream.model().clone();
            let tail = self.queue.poses_until(msg.t_gen, model.tail_len());
            *stream = ArmaStream::new(model);
            stream.extend(&tail);
        } else {
            stream.extend(self.queue.between(*seen, msg.t_gen).map(|s| &s.pose));
        }
        *seen = msg.t_gen;
        let t_s = self.sc.stages.t_s;
        let steps = |h: Tick| (h + t_s / 2) / t_s;
        match stream.forecast_pair(steps(a.h_c), steps(a.h_r)) {
            Ok(p) => p,
            Err(e) => {
                log::debug!("forecast for sample {} failed ({e}), holding", msg.t_gen);
                hold
            }
        }
    }

    fn on_computed(&mut self, msg: PoseMsg, now: Tick) -> Result<(), PipelineError> {
        self.stamp(msg.id, Stage::Computed, now);
        let ik = self.sc.ik;
        let r = self.chain.ik_dls(&msg.pred_r, &self.render_target, &ik)?;
        if !r.converged {
            self.log.ik_unconverged += 1;
        }
        let c_q = if msg.pred_c == msg.pred_r && self.control_target == self.render_target {
            r.q.clone()
        } else {
            let c = self.chain.ik_dls(&msg.pred_c, &self.control_target, &ik)?;
            if !c.converged {
                self.log.ik_unconverged += 1;
            }
            c.q
        };
        self.render_target = r.q;
        self.control_target = c_q;
        if self.render_msg.replace(msg.id).is_some() && !self.render_captured {
            self.log.superseded += 1;
        }
        self.render_captured = false;
        if self.pending_control.replace(msg.id).is_some() {
            self.log.superseded += 1;
        }
        self.predicted = (msg.pred_c, msg.pred_r);
        Ok(())
    }

    /// Simulates one tick.
    pub fn step(&mut self) -> Result<(), PipelineError> {
        if self.is_finished() {
            return Err(PipelineError::Finished);
        }
        let now = self.now;
        if self.pacer.is_some_and(|p| p.wait(now)) {
            self.mark_degraded();
        }
        let b = self.sc.stages.clone();

        // operator device
        let o = match self.first_pose.take() {
            Some(p) if now == 0 => p,
            _ => self.source.pose_at(now),
        };
        self.last_operator = o;
        self.log.operator.push(now, o)?;
        if now % b.t_s == 0 {
            let id = self.log.messages.len();
            self.log.messages.push(MessageRecord::new(id, now));
            self.queue.push_sample(crate::model::StampedSample::new(o, now))?;
            self.q_stage.send(
                SampleMsg {
                    id,
                    t_gen: now,
                    pose: o,
                },
                now,
            );
            self.log.messages[id].injected.t_q = Some(b.t_q);
        }
        if self.refit_pending {
            self.refit();
        }

        // queue → prediction → uplink → Metaverse
        for d in self.q_stage.poll(now) {
            let m = d.msg;
            self.stamp(m.id, Stage::Queued, now);
            let (pred_c, pred_r) = self.forecast(&m);
            let rec = &mut self.log.messages[m.id];
            rec.h_r = self.action.h_r;
            rec.h_c = self.action.h_c;
            rec.injected.t_p = Some(b.t_p);
            self.p_stage.send(
                PoseMsg {
                    id: m.id,
                    t_gen: m.t_gen,
                    pred_c,
                    pred_r,
                },
                now,
            );
        }
        for d in self.p_stage.poll(now) {
            self.stamp(d.msg.id, Stage::Predicted, now);
            self.stamp(d.msg.id, Stage::Sent, now);
            self.uplink.send(d.msg, now);
        }
        for d in self.uplink.poll(now) {
            self.stamp(d.msg.id, Stage::Received, now);
            let rec = &mut self.log.messages[d.msg.id];
            rec.injected.t_o = Some(d.delay);
            rec.injected.t_c = Some(b.t_c);
            self.c_stage.send(d.msg, now);
        }
        for d in self.c_stage.poll(now) {
            self.on_computed(d.msg, now)?;
        }

        // virtual arms
        if now % b.t_si == 0 {
            let dt = b.t_si as f64 * TICK_SECONDS;
            let sub = self.sc.controller.substeps;
            self.render_arm = advance_virtual_arm(
                &self.render_arm,
                &self.render_target,
                &self.gains,
                dt,
                sub,
                &self.limits,
            )?;
            self.control_arm = advance_virtual_arm(
                &self.control_arm,
                &self.control_target,
                &self.gains,
                dt,
                sub,
                &self.limits,
            )?;
        }

        // Metaverse → real arm
        if let Some(id) = self.pending_control.take() {
            let cmd = smooth_command(&mut self.smoother, &self.control_arm.q, now);
            let k = (now - self.last_packet).max(1) as usize;
            let setpoints = interpolate_commands(&self.last_cmd, &cmd, k)?;
            self.last_cmd = cmd;
            self.last_packet = now;
            self.log.messages[id].injected.t_i = Some(b.t_i);
            let t_gen = self.log.messages[id].t_gen;
            self.i_stage.send(ControlPacket { id, t_gen, setpoints }, now);
        }
        for d in self.i_stage.poll(now) {
            self.stamp(d.msg.id, Stage::Interpolated, now);
            self.downlink.send(d.msg, now);
        }
        for d in self.downlink.poll(now) {
            let p = d.msg;
            self.stamp(p.id, Stage::Delivered, now);
            self.log.messages[p.id].injected.t_l = Some(d.delay);
            self.setpoints = p.setpoints.into();
            let ev = self.aol.apply(p.t_gen, now)?;
            self.log.aol_events.push(ev);
        }
        if let Some(sp) = self.setpoints.pop_front() {
            self.real_target = sp;
        }
        let period = self.real.control_period;
        if now % period == 0 {
            let rep = step_real_arm(&mut self.real, &self.real_target, period as f64 * TICK_SECONDS);
            if rep.clamped {
                self.log.joint_clamps += 1;
            }
        }
        let real_pose = self.chain.forward_kinematics(&self.real.state.q)?;
        self.log.real.push(now, real_pose)?;
        let aol = self.aol.update_gen(None, now)?;
        self.log.aol.push(aol);

        // Metaverse → operator display
        if now % b.frame_period() == 0 {
            let pose = self.chain.forward_kinematics(&self.render_arm.q)?;
            if self.render_msg.is_some() {
                self.render_captured = true;
            }
            let frame = Frame {
                capture: now,
                msg: self.render_msg,
                pose,
                rendered: now,
            };
            self.r_stage.send(frame, now);
        }
        for d in self.r_stage.poll(now) {
            let mut f = d.msg;
            f.rendered = now;
            self.feedback.send(f, now);
        }
        for d in self.feedback.poll(now) {
            let f = d.msg;
            self.displayed = f.pose;
            if let Some(id) = f.msg {
                let rec = &mut self.log.messages[id];
                if rec.stamps.get(Stage::Displayed).is_none() {
                    let computed = rec.stamps.get(Stage::Computed).expect("frame follows computation");
                    rec.injected.frame_wait = Some(f.capture - computed);
                    rec.injected.t_r = Some(b.t_r);
                    rec.injected.t_v = Some(d.delay);
                    rec.stamps.set(Stage::Rendered, f.rendered);
                    rec.stamps.set(Stage::Displayed, now);
                }
            }
        }
        self.log.virtual_pose.push(now, self.displayed)?;

        self.now += 1;
        if self.source.disconnected() {
            log::info!("operator feed disconnected at tick {now}");
            self.end = self.now;
        }
        Ok(())
    }
}

/// Runs a whole episode, querying `policy` at every decision boundary.
pub fn run_episode(
    sc: &Scenario,
    policy: &mut dyn HorizonPolicy,
    source: Box<dyn TrajectorySource>,
) -> Result<EpisodeLog, PipelineError> {
    let mut sim = Simulator::new(sc, source)?;
    while !sim.is_finished() {
        let a = policy.decide(&sim.observe());
        sim.run_interval(a)?;
    }
    let mut log = sim.finish();
    log.policy = policy.label();
    Ok(log)
}
