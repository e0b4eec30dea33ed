//! Client clock offset from server-initiated round trips.
//!
//! The server sends `sync` with its send time `t1`; the client echoes it with
//! its own receive time `t2`; the server notes the echo's arrival `t3`. With
//! symmetric legs the client clock reads `t2 - (t1 + t3) / 2` ahead of the
//! server's. The sample with the smallest round trip is kept.

/// Exchanges per handshake.
pub const SYNC_ROUNDS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockSample {
    /// Client clock minus server clock, ms.
    pub offset_ms: f64,
    pub rtt_ms: f64,
}

pub fn sample(t1: i64, t2: i64, t3: i64) -> ClockSample {
    ClockSample {
        offset_ms: t2 as f64 - (t1 + t3) as f64 / 2.0,
        rtt_ms: (t3 - t1) as f64,
    }
}

#[derive(Debug, Clone, Default)]
pub struct ClockSync {
    /// Outstanding ping: sequence number and send time.
    pending: Option<(u32, i64)>,
    best: Option<ClockSample>,
    rounds: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SyncStep {
    /// Send another ping with this sequence number.
    Again(u32),
    Done(ClockSample),
}

impl ClockSync {
    pub fn ping(&mut self, seq: u32, t_server_ms: i64) {
        self.pending = Some((seq, t_server_ms));
    }

    /// Handles an echo arriving at `now`. Echoes that do not match the
    /// outstanding ping are ignored.
    pub fn on_reply(&mut self, seq: u32, t1: i64, t2: i64, now: i64) -> Option<SyncStep> {
        if self.pending != Some((seq, t1)) || now < t1 {
            return None;
        }
        self.pending = None;
        self.rounds += 1;
        let s = sample(t1, t2, now);
        if self.best.is_none_or(|b| s.rtt_ms < b.rtt_ms) {
            self.best = Some(s);
        }
        Some(if self.rounds < SYNC_ROUNDS {
            SyncStep::Again(seq + 1)
        } else {
            SyncStep::Done(self.best.expect("set above"))
        })
    }

    pub fn best(&self) -> Option<ClockSample> {
        self.best
    }

    pub fn is_done(&self) -> bool {
        self.rounds >= SYNC_ROUNDS
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_round_trip_recovers_the_offset() {
        // client runs 250 ms ahead; 8 ms each way
        let s = sample(1000, 1258, 1016);
        assert_eq!(s.offset_ms, 250.0);
        assert_eq!(s.rtt_ms, 16.0);
    }

    #[test]
    fn keeps_the_fastest_exchange() {
        let mut c = ClockSync::default();
        c.ping(0, 100);
        // slow, asymmetric first round
        assert_eq!(c.on_reply(0, 100, 170, 140), Some(SyncStep::Again(1)));
        c.ping(1, 200);
        let Some(SyncStep::Done(best)) = c.on_reply(1, 200, 252, 204) else {
            panic!("handshake should finish after two rounds")
        };
        assert_eq!(best, sample(200, 252, 204));
        assert!(c.is_done());
    }

    #[test]
    fn ignores_unsolicited_echoes() {
        let mut c = ClockSync::default();
        assert_eq!(c.on_reply(0, 5, 5, 6), None);
        c.ping(0, 10);
        assert_eq!(c.on_reply(0, 11, 20, 30), None);
        assert_eq!(c.on_reply(3, 10, 20, 30), None);
        assert!(c.best().is_none());
    }
}
