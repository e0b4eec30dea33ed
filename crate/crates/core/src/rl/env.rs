use super::{RewardWeights, RlError};
use crate::model::{rmse_orientation, rmse_position, Tick, TraceWindow};
use crate::pipeline::{EnvAction, EnvState, EpisodeLog, Scenario, Simulator, TrajectorySource};

/// Weighted sum of the four synchronization errors over one window:
/// position and orientation RMSE of operator vs virtual, and of virtual vs
/// real, compared at identical ticks.
pub fn compute_reward(
    operator: &TraceWindow,
    virtual_pose: &TraceWindow,
    real: &TraceWindow,
    w: &RewardWeights,
) -> Result<f64, RlError> {
    Ok(w.w1 * rmse_position(operator, virtual_pose)?
        + w.w2 * rmse_position(virtual_pose, real)?
        + w.w3 * rmse_orientation(operator, virtual_pose)?
        + w.w4 * rmse_orientation(virtual_pose, real)?)
}

/// Reward over the ticks `start..end` of a log.
pub fn interval_reward(log: &EpisodeLog, start: Tick, end: Tick, w: &RewardWeights) -> Result<f64, RlError> {
    compute_reward(
        &log.operator.slice(start, end),
        &log.virtual_pose.slice(start, end),
        &log.real.slice(start, end),
        w,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
    /// The action exceeded a horizon bound and was clamped.
    pub clamped: bool,
}

/// The simulator seen as an MDP stepping one decision interval at a time.
pub struct Env {
    sim: Simulator,
    weights: RewardWeights,
}

impl Env {
    pub fn new(sc: &Scenario, source: Box<dyn TrajectorySource>) -> Result<Self, RlError> {
        Ok(Self {
            sim: Simulator::new(sc, source)?,
            weights: sc.reward,
        })
    }

    pub fn from_scenario(sc: &Scenario) -> Result<Self, RlError> {
        Ok(Self {
            sim: Simulator::from_scenario(sc)?,
            weights: sc.reward,
        })
    }

    pub fn observe(&self) -> EnvState {
        self.sim.observe()
    }

    pub fn is_done(&self) -> bool {
        self.sim.is_finished()
    }

    pub fn simulator(&self) -> &Simulator {
        &self.sim
    }

    /// Clamps and applies `action` for the next decision interval, runs it,
    /// and scores it.
    pub fn step(&mut self, action: EnvAction) -> Result<Step, RlError> {
        let clamped = self.sim.decide(action)?;
        let (start, end) = self.sim.advance_interval()?;
        let reward = interval_reward(self.sim.log(), start, end, &self.weights)?;
        Ok(Step {
            state: self.sim.observe(),
            reward,
            done: self.sim.is_finished(),
            clamped,
        })
    }

    pub fn finish(self) -> EpisodeLog {
        self.sim.finish()
    }
}
