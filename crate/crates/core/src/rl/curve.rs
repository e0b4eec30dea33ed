use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RlError;

/// One row of the training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    /// 1-based, counted across both phases.
    pub episode: usize,
    /// Mean per-decision reward.
    pub mean_reward: f64,
    pub rmse_p_om: f64,
    pub rmse_p_mr: f64,
    pub rmse_o_om: f64,
    pub rmse_o_mr: f64,
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<(), RlError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "episode",
            "mean_reward",
            "rmse_p_om",
            "rmse_p_mr",
            "rmse_o_om",
            "rmse_o_mr",
        ])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>, RlError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Trailing moving average; entry `i` averages `values[i+1-w..=i]`, or
/// everything so far for the first `w-1` entries.
pub fn windowed_mean(values: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= w {
            sum -= values[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Median of the pairwise slopes `(y_j - y_i) / (j - i)` against the index.
pub fn theil_sen_slope(y: &[f64]) -> Option<f64> {
    let mut slopes = Vec::with_capacity(y.len() * y.len().saturating_sub(1) / 2);
    for i in 0..y.len() {
        for j in i + 1..y.len() {
            slopes.push((y[j] - y[i]) / (j - i) as f64);
        }
    }
    if slopes.is_empty() || slopes.iter().any(|s| s.is_nan()) {
        return None;
    }
    slopes.sort_by(f64::total_cmp);
    let m = slopes.len();
    Some(if m % 2 == 1 {
        slopes[m / 2]
    } else {
        0.5 * (slopes[m / 2 - 1] + slopes[m / 2])
    })
}

/// The mean of the last `window` values moved by at most `tol` (relative)
/// from the mean of the `window` before them.
pub fn has_plateaued(values: &[f64], window: usize, tol: f64) -> bool {
    let n = values.len();
    if window == 0 || n < 2 * window {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let recent = mean(&values[n - window..]);
    let before = mean(&values[n - 2 * window..n - window]);
    (recent - before).abs() <= tol * before.abs().max(f64::EPSILON)
}
