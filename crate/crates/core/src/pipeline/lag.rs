use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::model::{Stage, StageStamps, Tick, TraceWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatencyPath {
    /// Operator → Metaverse → real arm.
    Control,
    /// Operator → Metaverse → operator display.
    Render,
}

impl LatencyPath {
    /// Stages whose durations are summed, in order, starting after queueing.
    fn stages(self) -> [Stage; 6] {
        match self {
            LatencyPath::Control => [
                Stage::Queued,
                Stage::Predicted,
                Stage::Received,
                Stage::Computed,
                Stage::Interpolated,
                Stage::Delivered,
            ],
            LatencyPath::Render => [
                Stage::Queued,
                Stage::Predicted,
                Stage::Received,
                Stage::Computed,
                Stage::Rendered,
                Stage::Displayed,
            ],
        }
    }
}

/// Realized path latency as the sum of per-stage stamp differences:
/// `T_p + T_o + T_c + T_i + T_l` for control, `T_p + T_o + T_c + T_r + T_v`
/// for render. Queueing and sensing are not part of either sum.
pub fn total_latency(stamps: &StageStamps, path: LatencyPath) -> Result<Tick, PipelineError> {
    let stages = path.stages();
    let ticks = stages
        .iter()
        .map(|s| stamps.get(*s).ok_or(PipelineError::IncompleteLineage(s.name())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = 0;
    for w in ticks.windows(2) {
        total += w[1]
            .checked_sub(w[0])
            .ok_or_else(|| PipelineError::Validation(format!("stamps run backwards along the {path:?} path")))?;
    }
    Ok(total)
}

/// Lag, in ticks, that best aligns `output` with `input`: the argmin over
/// `lag ∈ [-max_lag, max_lag]` of the position RMSE between `input(t - lag)`
/// and `output(t)`. Ties go to the smaller `|lag|`, then to the positive one.
///
/// Both traces are resampled with zero-order hold onto their common span,
/// and every lag is scored over the same ticks.
pub fn estimate_effective_lag(input: &TraceWindow, output: &TraceWindow, max_lag: Tick) -> Result<i64, PipelineError> {
    let (Some(a0), Some(a1), Some(b0), Some(b1)) = (
        input.first_tick(),
        input.last_tick(),
        output.first_tick(),
        output.last_tick(),
    ) else {
        return Err(PipelineError::UndefinedLag("empty trace".into()));
    };
    let start = a0.max(b0);
    let end = a1.min(b1) + 1;
    let n = end.saturating_sub(start) as usize;
    let l = max_lag as usize;
    if n < 4 * l.max(1) {
        return Err(PipelineError::UndefinedLag(format!(
            "{n} shared ticks is shorter than four times the {max_lag}-tick search range"
        )));
    }
    let pos = |t: &TraceWindow| -> Vec<[f64; 3]> { t.resample_hold(start, end).poses().map(|p| p.position).collect() };
    let x = pos(input);
    let y = pos(output);
    let energy = (0..3)
        .map(|k| {
            let mean = x.iter().map(|p| p[k]).sum::<f64>() / n as f64;
            x.iter().map(|p| (p[k] - mean).powi(2)).sum::<f64>()
        })
        .sum::<f64>();
    if !(energy > 1e-18) {
        return Err(PipelineError::UndefinedLag("input has no motion".into()));
    }
    let score = |lag: i64| -> f64 {
        let mut s = 0.0;
        for t in l..n - l {
            let a = &x[(t as i64 - lag) as usize];
            let b = &y[t];
            s += (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
        }
        s
    };
    let mut best = (0, score(0));
    for mag in 1..=max_lag as i64 {
        for lag in [mag, -mag] {
            let s = score(lag);
            if s < best.1 {
                best = (lag, s);
            }
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Pose;

    fn wave(delay: i64, n: Tick) -> TraceWindow {
        TraceWindow::from_samples(
            (0..n)
                .map(|t| {
                    let s = (t as i64 - delay) as f64 * 1e-3;
                    (t, Pose::from_position([(6.0 * s).sin(), (4.0 * s).cos(), 0.0]))
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn recovers_constructed_shift() {
        let x = wave(0, 2000);
        assert_eq!(estimate_effective_lag(&x, &wave(40, 2000), 100).unwrap(), 40);
        assert_eq!(estimate_effective_lag(&x, &wave(-25, 2000), 100).unwrap(), -25);
        assert_eq!(estimate_effective_lag(&x, &x, 100).unwrap(), 0);
    }

    #[test]
    fn constant_input_is_undefined() {
        let c = TraceWindow::from_samples((0..1000).map(|t| (t, Pose::default())).collect()).unwrap();
        assert!(matches!(
            estimate_effective_lag(&c, &c, 50),
            Err(PipelineError::UndefinedLag(_))
        ));
    }

    #[test]
    fn short_trace_is_rejected() {
        let x = wave(0, 300);
        assert!(estimate_effective_lag(&x, &x, 100).is_err());
    }

    #[test]
    fn missing_stamp_is_incomplete() {
        let mut s = StageStamps::default();
        s.set(Stage::Queued, 0);
        assert!(matches!(
            total_latency(&s, LatencyPath::Control),
            Err(PipelineError::IncompleteLineage("predicted"))
        ));
    }
}
