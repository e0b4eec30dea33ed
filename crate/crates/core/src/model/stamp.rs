use serde::{Deserialize, Serialize};

use super::{ModelError, Pose, Tick};

/// Points in the operator → Metaverse → arm pipeline where a message is stamped.
///
/// The order of the variants is pipeline order. After `Computed` the control
/// branch (`Interpolated`, `Delivered`) and the render branch (`Rendered`,
/// `Displayed`) run in parallel, so ordering is only checked per branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Sensed,
    Queued,
    Predicted,
    Sent,
    Received,
    Computed,
    Interpolated,
    Delivered,
    Rendered,
    Displayed,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Sensed,
        Stage::Queued,
        Stage::Predicted,
        Stage::Sent,
        Stage::Received,
        Stage::Computed,
        Stage::Interpolated,
        Stage::Delivered,
        Stage::Rendered,
        Stage::Displayed,
    ];

    pub const CONTROL_BRANCH: [Stage; 8] = [
        Stage::Sensed,
        Stage::Queued,
        Stage::Predicted,
        Stage::Sent,
        Stage::Received,
        Stage::Computed,
        Stage::Interpolated,
        Stage::Delivered,
    ];

    pub const RENDER_BRANCH: [Stage; 8] = [
        Stage::Sensed,
        Stage::Queued,
        Stage::Predicted,
        Stage::Sent,
        Stage::Received,
        Stage::Computed,
        Stage::Rendered,
        Stage::Displayed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sensed => "sensed",
            Stage::Queued => "queued",
            Stage::Predicted => "predicted",
            Stage::Sent => "sent",
            Stage::Received => "received",
            Stage::Computed => "computed",
            Stage::Interpolated => "interpolated",
            Stage::Delivered => "delivered",
            Stage::Rendered => "rendered",
            Stage::Displayed => "displayed",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageStamps([Option<Tick>; 10]);

impl StageStamps {
    pub fn get(&self, stage: Stage) -> Option<Tick> {
        self.0[stage.index()]
    }

    pub fn set(&mut self, stage: Stage, tick: Tick) {
        self.0[stage.index()] = Some(tick);
    }

    pub fn require(&self, stage: Stage) -> Result<Tick, ModelError> {
        self.get(stage).ok_or(ModelError::MissingStamp(stage.name()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (Stage, Tick)> + '_ {
        Stage::ALL.iter().filter_map(move |s| self.get(*s).map(|t| (*s, t)))
    }

    /// Checks that the stamps present on each branch never go backwards.
    pub fn is_monotone(&self) -> bool {
        let branch_ok = |branch: &[Stage]| {
            let mut last = 0;
            for s in branch {
                if let Some(t) = self.get(*s) {
                    if t < last {
                        return false;
                    }
                    last = t;
                }
            }
            true
        };
        branch_ok(&Stage::CONTROL_BRANCH) && branch_ok(&Stage::RENDER_BRANCH)
    }
}

/// A pose sample together with its lineage through the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StampedSample {
    pub pose: Pose,
    pub t_gen: Tick,
    pub stamps: StageStamps,
}

impl StampedSample {
    pub fn new(pose: Pose, t_gen: Tick) -> Self {
        let mut stamps = StageStamps::default();
        stamps.set(Stage::Sensed, t_gen);
        Self { pose, t_gen, stamps }
    }

    /// Records `stage` at `tick`, rejecting stamps that would run backwards.
    pub fn stamp(&mut self, stage: Stage, tick: Tick) -> Result<(), ModelError> {
        let mut next = self.stamps;
        next.set(stage, tick);
        if !next.is_monotone() {
            return Err(ModelError::NonMonotoneStamp(stage.name()));
        }
        self.stamps = next;
        Ok(())
    }
}
