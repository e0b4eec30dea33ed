use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::model::Tick;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DelayKind {
    Constant,
    Gaussian,
    Trace,
}

/// Delay distribution of one stage or link, in whole milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DelayModel {
    pub kind: DelayKind,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub floor_ms: Tick,
    /// Recorded delays replayed in order (and cycled) by the `trace` kind.
    pub trace: Option<Vec<Tick>>,
    pub seed: u64,
}

impl Default for DelayModel {
    fn default() -> Self {
        Self::constant(0)
    }
}

impl DelayModel {
    pub fn constant(ms: Tick) -> Self {
        Self {
            kind: DelayKind::Constant,
            mean_ms: ms as f64,
            std_ms: 0.0,
            floor_ms: 0,
            trace: None,
            seed: 0,
        }
    }

    /// Normal delays rounded to the tick and truncated below at 1 ms.
    pub fn gaussian(mean_ms: f64, std_ms: f64) -> Self {
        Self {
            kind: DelayKind::Gaussian,
            mean_ms,
            std_ms,
            floor_ms: 1,
            trace: None,
            seed: 0,
        }
    }

    pub fn trace(delays: Vec<Tick>) -> Self {
        let mean = delays.iter().sum::<Tick>() as f64 / delays.len().max(1) as f64;
        Self {
            kind: DelayKind::Trace,
            mean_ms: mean,
            std_ms: 0.0,
            floor_ms: 0,
            trace: Some(delays),
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self, name: &str) -> Result<(), PipelineError> {
        let bad = |msg: &str| Err(PipelineError::Validation(format!("delay `{name}`: {msg}")));
        if !self.mean_ms.is_finite() || self.mean_ms < 0.0 {
            return bad("mean_ms must be finite and non-negative");
        }
        match self.kind {
            DelayKind::Constant if self.mean_ms.fract() != 0.0 => bad("constant delay must be a whole number of ms"),
            DelayKind::Gaussian if !(self.std_ms.is_finite() && self.std_ms >= 0.0) => {
                bad("std_ms must be finite and non-negative")
            }
            DelayKind::Trace if self.trace.as_ref().is_none_or(|t| t.is_empty()) => bad("trace kind needs delays"),
            _ => Ok(()),
        }
    }

    /// Mean of the realized (rounded, floored) delay, estimated for the
    /// gaussian kind by numeric integration.
    pub fn expected_ms(&self) -> f64 {
        match self.kind {
            DelayKind::Constant => (self.mean_ms as Tick).max(self.floor_ms) as f64,
            DelayKind::Trace => {
                let t = self.trace.as_deref().unwrap_or(&[]);
                t.iter().map(|d| (*d).max(self.floor_ms) as f64).sum::<f64>() / t.len().max(1) as f64
            }
            DelayKind::Gaussian => {
                if self.std_ms == 0.0 {
                    return (self.mean_ms.round() as Tick).max(self.floor_ms) as f64;
                }
                let lo = (self.mean_ms - 8.0 * self.std_ms).floor() as i64;
                let hi = (self.mean_ms + 8.0 * self.std_ms).ceil() as i64;
                let cdf = |x: f64| 0.5 * (1.0 + erf((x - self.mean_ms) / (self.std_ms * std::f64::consts::SQRT_2)));
                (lo..=hi)
                    .map(|k| {
                        let p = cdf(k as f64 + 0.5) - cdf(k as f64 - 0.5);
                        p * (k.max(self.floor_ms as i64)) as f64
                    })
                    .sum::<f64>()
                    + cdf(lo as f64 - 0.5) * self.floor_ms as f64
            }
        }
    }
}

/// Abramowitz–Stegun 7.1.26, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let s = x.signum();
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.327_591_1 * x);
    let y = 1.0
        - (((((1.061_405_429 * t - 1.453_152_027) * t) + 1.421_413_741) * t - 0.284_496_736) * t + 0.254_829_592)
            * t
            * (-x * x).exp();
    s * y
}

/// Seeded sampler over a [`DelayModel`].
#[derive(Debug, Clone)]
pub struct DelaySampler {
    model: DelayModel,
    rng: ChaCha8Rng,
    normal: Option<Normal<f64>>,
    trace_pos: usize,
    truncated: u64,
}

impl DelaySampler {
    pub fn new(model: DelayModel, stream: u64) -> Self {
        let normal = match model.kind {
            DelayKind::Gaussian => Normal::new(model.mean_ms, model.std_ms).ok(),
            _ => None,
        };
        let rng = ChaCha8Rng::seed_from_u64(model.seed);
        let mut s = Self {
            model,
            rng,
            normal,
            trace_pos: 0,
            truncated: 0,
        };
        s.rng.set_stream(stream);
        s
    }

    pub fn model(&self) -> &DelayModel {
        &self.model
    }

    /// Samples that fell below the floor and were raised to it.
    pub fn truncated(&self) -> u64 {
        self.truncated
    }

    pub fn sample(&mut self) -> Tick {
        let raw: i64 = match self.model.kind {
            DelayKind::Constant => self.model.mean_ms as i64,
            DelayKind::Gaussian => match &self.normal {
                Some(n) => n.sample(&mut self.rng).round() as i64,
                None => self.model.mean_ms.round() as i64,
            },
            DelayKind::Trace => {
                let t = self.model.trace.as_deref().unwrap_or(&[0]);
                let d = t[self.trace_pos % t.len()];
                self.trace_pos += 1;
                d as i64
            }
        };
        let floor = self.model.floor_ms as i64;
        if raw < floor {
            self.truncated += 1;
            floor as Tick
        } else {
            raw as Tick
        }
    }
}

/// Messages that know when their payload was generated.
pub trait Generated {
    fn t_gen(&self) -> Tick;
}

#[derive(Debug, Clone)]
pub struct Delivery<M> {
    pub msg: M,
    pub sent_at: Tick,
    pub delivered_at: Tick,
    /// Sampled delay, ticks.
    pub delay: Tick,
}

#[derive(Debug)]
struct InFlight<M> {
    deliver_at: Tick,
    seq: u64,
    sent_at: Tick,
    msg: M,
}

impl<M> PartialEq for InFlight<M> {
    fn eq(&self, other: &Self) -> bool {
        (self.deliver_at, self.seq) == (other.deliver_at, other.seq)
    }
}

impl<M> Eq for InFlight<M> {}

impl<M> PartialOrd for InFlight<M> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<M> Ord for InFlight<M> {
    // min-heap on (deliver_at, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        (other.deliver_at, other.seq).cmp(&(self.deliver_at, self.seq))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCounters {
    pub sent: u64,
    pub delivered: u64,
    pub stale: u64,
    pub truncated: u64,
    pub in_flight: u64,
}

/// Link or processing stage that delays messages, possibly reordering them.
///
/// With `drop_stale` set, a message generated no later than the freshest one
/// already delivered is discarded on arrival (latest-state semantics).
#[derive(Debug)]
pub struct DelayChannel<M> {
    sampler: DelaySampler,
    heap: BinaryHeap<InFlight<M>>,
    seq: u64,
    last_send: Option<Tick>,
    last_poll: Option<Tick>,
    freshest: Option<Tick>,
    drop_stale: bool,
    counters: ChannelCounters,
}

impl<M: Generated> DelayChannel<M> {
    pub fn new(model: DelayModel, stream: u64, drop_stale: bool) -> Self {
        Self {
            sampler: DelaySampler::new(model, stream),
            heap: BinaryHeap::new(),
            seq: 0,
            last_send: None,
            last_poll: None,
            freshest: None,
            drop_stale,
            counters: ChannelCounters::default(),
        }
    }

    pub fn model(&self) -> &DelayModel {
        self.sampler.model()
    }

    /// Enqueues `msg`; returns the tick it becomes deliverable.
    pub fn send(&mut self, msg: M, now: Tick) -> Tick {
        debug_assert!(self.last_send.is_none_or(|t| now >= t), "send time went backwards");
        self.last_send = Some(now);
        let delay = self.sampler.sample();
        let deliver_at = now + delay;
        self.heap.push(InFlight {
            deliver_at,
            seq: self.seq,
            sent_at: now,
            msg,
        });
        self.seq += 1;
        self.counters.sent += 1;
        deliver_at
    }

    /// Everything due by `now`, in delivery order, minus stale messages.
    pub fn poll(&mut self, now: Tick) -> Vec<Delivery<M>> {
        debug_assert!(self.last_poll.is_none_or(|t| now >= t), "poll time went backwards");
        self.last_poll = Some(now);
        let mut out = Vec::new();
        while self.heap.peek().is_some_and(|m| m.deliver_at <= now) {
            let m = self.heap.pop().expect("peeked");
            let gen = m.msg.t_gen();
            if self.drop_stale && self.freshest.is_some_and(|f| gen <= f) {
                self.counters.stale += 1;
                continue;
            }
            self.freshest = Some(self.freshest.map_or(gen, |f| f.max(gen)));
            self.counters.delivered += 1;
            out.push(Delivery {
                delay: m.deliver_at - m.sent_at,
                msg: m.msg,
                sent_at: m.sent_at,
                delivered_at: m.deliver_at,
            });
        }
        out
    }

    pub fn in_flight(&self) -> usize {
        self.heap.len()
    }

    pub fn counters(&self) -> ChannelCounters {
        ChannelCounters {
            truncated: self.sampler.truncated(),
            in_flight: self.heap.len() as u64,
            ..self.counters
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Msg(Tick);

    impl Generated for Msg {
        fn t_gen(&self) -> Tick {
            self.0
        }
    }

    #[test]
    fn constant_delay_delivers_on_time() {
        let mut ch = DelayChannel::new(DelayModel::constant(30), 0, true);
        assert_eq!(ch.send(Msg(100), 100), 130);
        assert!(ch.poll(129).is_empty());
        let d = ch.poll(130);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].msg, Msg(100));
        assert_eq!(d[0].delay, 30);
    }

    #[test]
    fn reordered_message_is_dropped_as_stale() {
        let mut ch = DelayChannel::new(DelayModel::trace(vec![50, 10]), 0, true);
        ch.send(Msg(0), 0);
        ch.send(Msg(1), 1);
        let first = ch.poll(11);
        assert_eq!(first.len(), 1);
        assert_eq!(first[0].msg, Msg(1));
        assert!(ch.poll(60).is_empty());
        assert_eq!(ch.counters().stale, 1);
    }

    #[test]
    fn trace_model_replays_and_cycles() {
        let mut s = DelaySampler::new(DelayModel::trace(vec![3, 1, 4]), 0);
        let got: Vec<_> = (0..7).map(|_| s.sample()).collect();
        assert_eq!(got, vec![3, 1, 4, 3, 1, 4, 3]);
    }

    #[test]
    fn gaussian_floor_is_applied() {
        let mut s = DelaySampler::new(DelayModel::gaussian(1.0, 5.0).with_seed(9), 0);
        for _ in 0..1000 {
            assert!(s.sample() >= 1);
        }
        assert!(s.truncated() > 0);
    }

    #[test]
    fn expected_delay_accounts_for_rounding_and_floor() {
        assert_eq!(DelayModel::constant(30).expected_ms(), 30.0);
        assert!((DelayModel::gaussian(75.0, 12.5).expected_ms() - 75.0).abs() < 1e-6);
        // half the mass sits below the floor of 1
        let e = DelayModel::gaussian(0.0, 10.0).expected_ms();
        let mut s = DelaySampler::new(DelayModel::gaussian(0.0, 10.0).with_seed(4), 0);
        let m = (0..200_000).map(|_| s.sample() as f64).sum::<f64>() / 200_000.0;
        assert!((e - m).abs() < 0.05, "{e} vs {m}");
    }

    #[test]
    fn validation_rejects_bad_models() {
        assert!(DelayModel::constant(3).validate("x").is_ok());
        let mut m = DelayModel::constant(3);
        m.mean_ms = 2.5;
        assert!(m.validate("x").is_err());
        let mut t = DelayModel::trace(vec![1]);
        t.trace = Some(vec![]);
        assert!(t.validate("x").is_err());
        assert!(DelayModel::gaussian(-1.0, 1.0).validate("x").is_err());
    }
}
