//! Per-session bookkeeping with no I/O: pose admission, counters and the
//! command state machine. Time is passed in by the caller.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use telesync_core::model::Pose;

use crate::clock::ClockSync;
use crate::wire::{CtrlCmd, SessionState};

/// Accepted pose frames per second before frames are dropped.
pub const DEFAULT_RATE_CAP_HZ: u32 = 200;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Pose frames seen, whatever happened to them.
    pub received: u64,
    pub accepted: u64,
    /// Older than a sample already accepted.
    pub stale: u64,
    pub rate_dropped: u64,
    /// Pose frames whose pose was unusable.
    pub invalid: u64,
    /// Frames of any kind that did not parse.
    pub malformed: u64,
}

/// Sliding one-second admission window.
#[derive(Debug, Clone)]
pub struct RateWindow {
    cap: usize,
    accepted: VecDeque<i64>,
}

impl RateWindow {
    pub fn new(cap_hz: u32) -> Self {
        Self {
            cap: cap_hz as usize,
            accepted: VecDeque::with_capacity(cap_hz as usize + 1),
        }
    }

    pub fn admit(&mut self, now_ms: i64) -> bool {
        while self.accepted.front().is_some_and(|&t| t <= now_ms - 1000) {
            self.accepted.pop_front();
        }
        if self.accepted.len() >= self.cap {
            return false;
        }
        self.accepted.push_back(now_ms);
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ingest {
    Accepted(Pose),
    Stale,
    /// Dropped by the rate cap; `notify` is set at most once per second.
    RateLimited {
        notify: bool,
    },
    Invalid(String),
}

#[derive(Debug, Clone)]
pub struct SessionCore {
    pub state: SessionState,
    pub counters: Counters,
    pub clock: ClockSync,
    freshest: Option<i64>,
    latest: Option<(i64, Pose)>,
    rate: RateWindow,
    last_rate_notice: Option<i64>,
}

impl SessionCore {
    pub fn new(rate_cap_hz: u32) -> Self {
        Self {
            state: SessionState::Idle,
            counters: Counters::default(),
            clock: ClockSync::default(),
            freshest: None,
            latest: None,
            rate: RateWindow::new(rate_cap_hz),
            last_rate_notice: None,
        }
    }

    /// Latest accepted pose with the server time it arrived.
    pub fn latest(&self) -> Option<(i64, Pose)> {
        self.latest
    }

    pub fn malformed(&mut self) {
        self.counters.malformed += 1;
    }

    pub fn ingest(&mut self, t_client_ms: i64, p: [f64; 7], now_ms: i64) -> Ingest {
        self.counters.received += 1;
        let pose = match Pose::from_array(p) {
            Ok(pose) => pose,
            Err(e) => {
                self.counters.invalid += 1;
                return Ingest::Invalid(e.to_string());
            }
        };
        if self.freshest.is_some_and(|f| t_client_ms < f) {
            self.counters.stale += 1;
            return Ingest::Stale;
        }
        if !self.rate.admit(now_ms) {
            self.counters.rate_dropped += 1;
            let notify = self.last_rate_notice.is_none_or(|t| now_ms - t >= 1000);
            if notify {
                self.last_rate_notice = Some(now_ms);
            }
            return Ingest::RateLimited { notify };
        }
        self.counters.accepted += 1;
        self.freshest = Some(t_client_ms);
        self.latest = Some((now_ms, pose));
        Ingest::Accepted(pose)
    }

    /// Whether `cmd` may be issued now. Does not change the state.
    pub fn check(&self, cmd: CtrlCmd) -> Result<(), String> {
        use SessionState::*;
        let ok = match cmd {
            CtrlCmd::Start | CtrlCmd::StartHitlEpisode => self.state == Idle,
            CtrlCmd::Stop => matches!(self.state, Running | Hitl),
            CtrlCmd::SetPolicy => matches!(self.state, Idle | Running),
        };
        if ok {
            Ok(())
        } else {
            Err(format!("`{}` is not allowed while the session is {:?}", cmd.name(), self.state).to_lowercase())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HOME: [f64; 7] = [0.3, 0.1, 0.4, 0.0, 0.0, 0.0, 1.0];

    #[test]
    fn steady_100_hz_stream_is_lossless() {
        let mut core = SessionCore::new(DEFAULT_RATE_CAP_HZ);
        for i in 0..10_000i64 {
            // client clock 3 s ahead, ±3 ms arrival jitter
            let now = i * 10 + (i * 7919 % 7) - 3;
            assert!(matches!(core.ingest(3000 + i * 10, HOME, now), Ingest::Accepted(_)));
        }
        let c = core.counters;
        assert_eq!(
            (c.received, c.accepted, c.stale, c.rate_dropped),
            (10_000, 10_000, 0, 0)
        );
    }

    #[test]
    fn flood_is_capped_and_reported_once_per_second() {
        let mut core = SessionCore::new(200);
        let mut notices = 0;
        // 1000 Hz for 3 s
        for i in 0..3000i64 {
            if let Ingest::RateLimited { notify: true } = core.ingest(i, HOME, i) {
                notices += 1;
            }
        }
        assert_eq!(core.counters.accepted, 600);
        assert_eq!(core.counters.rate_dropped, 2400);
        assert_eq!(notices, 3);
    }

    #[test]
    fn older_samples_are_stale_and_do_not_move_the_latest_pose() {
        let mut core = SessionCore::new(200);
        core.ingest(100, HOME, 0);
        let mut moved = HOME;
        moved[0] = 0.5;
        assert_eq!(core.ingest(90, moved, 5), Ingest::Stale);
        assert_eq!(core.latest().unwrap().1, Pose::from_array(HOME).unwrap());
        // equal stamps are not older
        assert!(matches!(core.ingest(100, moved, 6), Ingest::Accepted(_)));
        assert_eq!(core.counters.stale, 1);
    }

    #[test]
    fn unusable_poses_are_rejected() {
        let mut core = SessionCore::new(200);
        let zero_quat = [0.0; 7];
        assert!(matches!(core.ingest(0, zero_quat, 0), Ingest::Invalid(_)));
        let nan = [f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        assert!(matches!(core.ingest(1, nan, 1), Ingest::Invalid(_)));
        assert_eq!(core.counters.invalid, 2);
        assert!(core.latest().is_none());
    }

    #[test]
    fn transition_table() {
        use CtrlCmd::*;
        use SessionState::*;
        let allowed = |state, cmd| {
            let mut c = SessionCore::new(200);
            c.state = state;
            c.check(cmd).is_ok()
        };
        let table = [
            (Idle, [true, false, true, true]),
            (Running, [false, true, true, false]),
            (Hitl, [false, true, false, false]),
            (Closed, [false, false, false, false]),
        ];
        for (state, row) in table {
            for (cmd, want) in [Start, Stop, SetPolicy, StartHitlEpisode].into_iter().zip(row) {
                assert_eq!(allowed(state, cmd), want, "{state:?} {cmd:?}");
            }
        }
        let mut c = SessionCore::new(200);
        c.state = Closed;
        assert_eq!(
            c.check(Start).unwrap_err(),
            "`start` is not allowed while the session is closed"
        );
    }

    proptest! {
        #[test]
        fn window_never_exceeds_cap(cap in 1u32..300, gaps in prop::collection::vec(0i64..20, 1..2000)) {
            let mut w = RateWindow::new(cap);
            let mut now = 0;
            let mut times = Vec::new();
            for g in gaps {
                now += g;
                if w.admit(now) {
                    times.push(now);
                }
                let recent = times.iter().filter(|&&t| t > now - 1000).count();
                prop_assert!(recent <= cap as usize);
            }
        }

        #[test]
        fn counters_add_up(stamps in prop::collection::vec((0i64..500, 0i64..3), 1..500)) {
            let mut core = SessionCore::new(50);
            let mut now = 0;
            for (t, dt) in stamps {
                now += dt;
                core.ingest(t, HOME, now);
            }
            let c = core.counters;
            prop_assert_eq!(c.received, c.accepted + c.stale + c.rate_dropped + c.invalid);
        }
    }
}
