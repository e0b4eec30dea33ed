use serde::{Deserialize, Serialize};

use super::{ModelError, StampedSample, Tick};

/// Age of Loop: ticks elapsed since the generation time of the last operator
/// sample whose command was applied to the arm.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AolTracker {
    last_applied_gen: Tick,
    last_now: Tick,
    current: Tick,
}

/// One application event: the age just before and just after the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AolEvent {
    pub tick: Tick,
    pub before: Tick,
    pub after: Tick,
}

impl AolTracker {
    /// Starts with `last_applied_gen = 0`, so the age grows from session start
    /// until the first command lands.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn current(&self) -> Tick {
        self.current
    }

    pub fn last_applied_gen(&self) -> Tick {
        self.last_applied_gen
    }

    pub fn update(&mut self, applied: Option<&StampedSample>, now: Tick) -> Result<Tick, ModelError> {
        self.update_gen(applied.map(|s| s.t_gen), now)
    }

    /// Same as [`update`](Self::update) but takes the generation tick directly.
    pub fn update_gen(&mut self, applied_gen: Option<Tick>, now: Tick) -> Result<Tick, ModelError> {
        if now < self.last_now {
            return Err(ModelError::TimeReversal {
                now,
                last: self.last_now,
            });
        }
        if let Some(gen) = applied_gen {
            if gen > now {
                return Err(ModelError::Causality { t_gen: gen, now });
            }
            // a late-arriving older sample never makes the loop look fresher
            // than it was
            if gen > self.last_applied_gen {
                self.last_applied_gen = gen;
            }
        }
        self.last_now = now;
        self.current = now - self.last_applied_gen;
        Ok(self.current)
    }

    /// Applies `gen` at `now` and reports the age before and after the jump.
    pub fn apply(&mut self, gen: Tick, now: Tick) -> Result<AolEvent, ModelError> {
        if now < self.last_now {
            return Err(ModelError::TimeReversal {
                now,
                last: self.last_now,
            });
        }
        let before = now - self.last_applied_gen;
        let after = self.update_gen(Some(gen), now)?;
        Ok(AolEvent {
            tick: now,
            before,
            after,
        })
    }
}
