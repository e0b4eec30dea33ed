use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use super::pose::{quat_dot, sign_align};
use super::{ModelError, Pose, Tick};

/// Time-ordered poses of one actor (operator, virtual arm or real arm).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceWindow {
    samples: Vec<(Tick, Pose)>,
}

impl TraceWindow {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            samples: Vec::with_capacity(n),
        }
    }

    /// Builds a window from samples, canonicalizing every pose.
    pub fn from_samples(samples: Vec<(Tick, Pose)>) -> Result<Self, ModelError> {
        let mut w = Self::with_capacity(samples.len());
        for (t, p) in samples {
            w.push(t, p)?;
        }
        Ok(w)
    }

    pub fn push(&mut self, tick: Tick, pose: Pose) -> Result<(), ModelError> {
        if let Some((last, _)) = self.samples.last() {
            if tick <= *last {
                return Err(ModelError::NonIncreasingTick { tick, last: *last });
            }
        }
        self.samples.push((tick, pose.canonicalized()?));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[(Tick, Pose)] {
        &self.samples
    }

    pub fn ticks(&self) -> impl Iterator<Item = Tick> + '_ {
        self.samples.iter().map(|(t, _)| *t)
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose> + '_ {
        self.samples.iter().map(|(_, p)| p)
    }

    pub fn first_tick(&self) -> Option<Tick> {
        self.samples.first().map(|(t, _)| *t)
    }

    pub fn last_tick(&self) -> Option<Tick> {
        self.samples.last().map(|(t, _)| *t)
    }

    /// Pose in effect at `tick` under zero-order hold.
    pub fn at(&self, tick: Tick) -> Option<&Pose> {
        match self.samples.binary_search_by_key(&tick, |(t, _)| *t) {
            Ok(i) => Some(&self.samples[i].1),
            Err(0) => None,
            Err(i) => Some(&self.samples[i - 1].1),
        }
    }

    /// Zero-order-hold resampling onto `[start, end)`. Ticks before the first
    /// sample are skipped.
    pub fn resample_hold(&self, start: Tick, end: Tick) -> TraceWindow {
        let mut out = TraceWindow::with_capacity(end.saturating_sub(start) as usize);
        let mut idx = match self.samples.binary_search_by_key(&start, |(t, _)| *t) {
            Ok(i) => i as isize,
            Err(i) => i as isize - 1,
        };
        for tick in start..end {
            while (idx + 1) < self.samples.len() as isize && self.samples[(idx + 1) as usize].0 <= tick {
                idx += 1;
            }
            if idx >= 0 {
                out.samples.push((tick, self.samples[idx as usize].1));
            }
        }
        out
    }

    /// Samples with `start <= tick < end`.
    pub fn slice(&self, start: Tick, end: Tick) -> TraceWindow {
        let lo = self.samples.partition_point(|(t, _)| *t < start);
        let hi = self.samples.partition_point(|(t, _)| *t < end);
        TraceWindow {
            samples: self.samples[lo..hi].to_vec(),
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), ModelError> {
        let mut wr = csv::Writer::from_writer(w);
        for (tick, pose) in &self.samples {
            wr.serialize(TraceRow::new(*tick, pose))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, ModelError> {
        let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
        let headers = rd.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != TRACE_HEADER {
            return Err(ModelError::Parse {
                line: 1,
                message: format!("expected header `{}`", TRACE_HEADER.join(",")),
            });
        }
        let mut out = TraceWindow::new();
        for rec in rd.deserialize::<TraceRow>() {
            let row = rec?;
            // header is line 1, so data rows are offset by one
            let line = out.len() as u64 + 2;
            let pose = row.pose().map_err(|e| ModelError::Parse {
                line,
                message: e.to_string(),
            })?;
            out.push(row.tick, pose).map_err(|e| ModelError::Parse {
                line,
                message: e.to_string(),
            })?;
        }
        Ok(out)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        for (tick, pose) in &self.samples {
            serde_json::to_writer(&mut w, &TraceRow::new(*tick, pose))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, ModelError> {
        let mut out = TraceWindow::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| ModelError::Parse {
                line: i as u64 + 1,
                message,
            };
            let row: TraceRow = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let pose = row.pose().map_err(|e| parse_err(e.to_string()))?;
            out.push(row.tick, pose).map_err(|e| parse_err(e.to_string()))?;
        }
        Ok(out)
    }
}

pub const TRACE_HEADER: [&str; 8] = ["tick", "px", "py", "pz", "qx", "qy", "qz", "qw"];

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct TraceRow {
    tick: Tick,
    px: f64,
    py: f64,
    pz: f64,
    qx: f64,
    qy: f64,
    qz: f64,
    qw: f64,
}

impl TraceRow {
    fn new(tick: Tick, p: &Pose) -> Self {
        let [px, py, pz, qx, qy, qz, qw] = p.to_array();
        Self {
            tick,
            px,
            py,
            pz,
            qx,
            qy,
            qz,
            qw,
        }
    }

    fn pose(&self) -> Result<Pose, ModelError> {
        Pose::new([self.px, self.py, self.pz], [self.qx, self.qy, self.qz, self.qw])
    }
}

/// Pairs up samples of `a` and `b` that share a tick.
fn shared<'a>(a: &'a TraceWindow, b: &'a TraceWindow) -> impl Iterator<Item = (&'a Pose, &'a Pose)> + 'a {
    let (mut i, mut j) = (0, 0);
    let (sa, sb) = (&a.samples, &b.samples);
    std::iter::from_fn(move || {
        while i < sa.len() && j < sb.len() {
            match sa[i].0.cmp(&sb[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    let pair = (&sa[i].1, &sb[j].1);
                    i += 1;
                    j += 1;
                    return Some(pair);
                }
            }
        }
        None
    })
}

/// Root mean squared Euclidean position distance over shared ticks.
pub fn rmse_position(a: &TraceWindow, b: &TraceWindow) -> Result<f64, ModelError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (pa, pb) in shared(a, b) {
        let d = pa.position_distance(pb);
        sum += d * d;
        n += 1;
    }
    if n == 0 {
        return Err(ModelError::EmptyWindow);
    }
    Ok((sum / n as f64).sqrt())
}

/// Component-wise quaternion RMSE over shared ticks, after aligning each pair
/// into the same hemisphere.
///
/// Averaged over the four components, so a trace compared with itself scores
/// zero and the double cover (`q` vs `-q`) also scores zero.
pub fn rmse_orientation(a: &TraceWindow, b: &TraceWindow) -> Result<f64, ModelError> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (pa, pb) in shared(a, b) {
        let qa = pa.orientation;
        let qb = sign_align(&qa, &pb.orientation);
        sum += qa.iter().zip(qb.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 4.0;
        n += 1;
    }
    if n == 0 {
        return Err(ModelError::EmptyWindow);
    }
    Ok((sum / n as f64).sqrt())
}

/// Quaternion distance used as the IK orientation tolerance.
pub fn quat_distance(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let s = if quat_dot(a, b) < 0.0 { -1.0 } else { 1.0 };
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - s * y) * (x - s * y))
        .sum::<f64>()
        .sqrt()
}
