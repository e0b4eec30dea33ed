//! Shared domain types: poses, stamped samples, traces and the Age-of-Loop
//! tracker.
//!
//! Time is measured in integer ticks of 1 ms throughout the crate.

mod aol;
mod pose;
mod stamp;
mod trace;

pub use aol::{AolEvent, AolTracker};
pub use pose::{
    canonicalize_quaternion, quat_conj, quat_dot, quat_from_axis_angle, quat_mul, sign_align, Pose, Quat, IDENTITY_QUAT,
};
pub use stamp::{Stage, StageStamps, StampedSample};
pub use trace::{quat_distance, rmse_orientation, rmse_position, TraceWindow, TRACE_HEADER};

/// Simulator time step index; one tick is one millisecond.
pub type Tick = u64;

pub const TICK_SECONDS: f64 = 1e-3;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid quaternion {0:?}: norm is zero or not finite")]
    InvalidQuaternion(Quat),
    #[error("non-finite value in pose")]
    NonFinite,
    #[error("windows share no ticks")]
    EmptyWindow,
    #[error("tick {tick} does not follow {last}")]
    NonIncreasingTick { tick: Tick, last: Tick },
    #[error("sample generated at {t_gen} applied at {now}")]
    Causality { t_gen: Tick, now: Tick },
    #[error("time went backwards: {now} < {last}")]
    TimeReversal { now: Tick, last: Tick },
    #[error("missing `{0}` stamp")]
    MissingStamp(&'static str),
    #[error("`{0}` stamp would precede an earlier stage")]
    NonMonotoneStamp(&'static str),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<csv::Error> for ModelError {
    fn from(e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        match e.into_kind() {
            csv::ErrorKind::Io(io) => ModelError::Io(io),
            kind => ModelError::Parse {
                line,
                message: format!("{kind:?}"),
            },
        }
    }
}
