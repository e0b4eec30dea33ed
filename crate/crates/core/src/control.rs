//! Metaverse-side controllers and the real-arm execution model.
//!
//! The virtual arms follow a single joint-space attractor
//! `q̈ = kp · cap(q' − q, θ) − kd · q̇`, integrated exactly for constant
//! acceleration over each sub-step. The real arm is a per-joint tracker with
//! velocity and acceleration limits.

use serde::{Deserialize, Serialize};

use crate::kinematics::JointState;
use crate::model::Tick;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ControlError {
    #[error("non-finite value in controller input")]
    NonFinite,
    #[error("expected {expected} joints, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid controller config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ControlError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    /// Position gain, 1/s².
    pub kp: f64,
    /// Damping gain, 1/s.
    pub kd: f64,
    /// Capping radius of the position error, rad.
    pub theta_cap: f64,
}

impl Default for ControllerGains {
    /// Critically damped and stiff enough that the virtual arm trails its
    /// target by `kd / kp` = 1 ms.
    fn default() -> Self {
        Self {
            kp: 4.0e6,
            kd: 4.0e3,
            theta_cap: 0.5,
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.kp > 0.0 && self.kd >= 0.0 && self.theta_cap > 0.0) {
            return Err(ControlError::Config(format!(
                "need kp > 0, kd >= 0, theta_cap > 0 (got {}, {}, {})",
                self.kp, self.kd, self.theta_cap
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RealArmConfig {
    /// rad/s
    pub vmax: f64,
    /// rad/s²
    pub amax: f64,
    pub control_period_ms: Tick,
}

impl Default for RealArmConfig {
    fn default() -> Self {
        Self {
            vmax: std::f64::consts::PI,
            amax: 40.0,
            control_period_ms: 2,
        }
    }
}

/// Controller block of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub kp: f64,
    pub kd: f64,
    pub theta_cap: f64,
    pub smoother_duration_ms: Tick,
    pub discontinuity_rad: f64,
    /// Physics sub-steps per tick for the virtual arms.
    pub substeps: u32,
    pub real_arm: RealArmConfig,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        let g = ControllerGains::default();
        Self {
            kp: g.kp,
            kd: g.kd,
            theta_cap: g.theta_cap,
            smoother_duration_ms: 50,
            discontinuity_rad: 0.1,
            substeps: 10,
            real_arm: RealArmConfig::default(),
        }
    }
}

impl ControllerConfig {
    pub fn gains(&self) -> ControllerGains {
        ControllerGains {
            kp: self.kp,
            kd: self.kd,
            theta_cap: self.theta_cap,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gains().validate()?;
        if self.smoother_duration_ms == 0 {
            return Err(ControlError::Config("smoother_duration_ms must be positive".into()));
        }
        if self.substeps == 0 {
            return Err(ControlError::Config("substeps must be positive".into()));
        }
        if !(self.discontinuity_rad > 0.0) {
            return Err(ControlError::Config("discontinuity_rad must be positive".into()));
        }
        let r = &self.real_arm;
        if !(r.vmax > 0.0 && r.amax > 0.0) || r.control_period_ms == 0 {
            return Err(ControlError::Config(
                "real arm limits and period must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn norm(u: &[f64]) -> f64 {
    u.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Scales `u` back onto the ball of radius `theta_cap` when it lies outside.
pub fn robust_cap(u: &[f64], theta_cap: f64) -> Vec<f64> {
    let n = norm(u);
    if n < theta_cap {
        return u.to_vec();
    }
    let s = theta_cap / n;
    let out: Vec<f64> = u.iter().map(|v| v * s).collect();
    // rounding in the division can leave the norm a few ulps above the cap
    let m = norm(&out);
    if m > theta_cap {
        let s2 = theta_cap / m * (1.0 - f64::EPSILON);
        return out.iter().map(|v| v * s2).collect();
    }
    out
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(ControlError::Dimension { expected, got });
    }
    Ok(())
}

/// Attractor acceleration toward `q_target`.
pub fn compute_accel(state: &JointState, q_target: &[f64], gains: &ControllerGains) -> Result<Vec<f64>> {
    check_len(state.dof(), q_target.len())?;
    check_len(state.dof(), state.qdot.len())?;
    if !state.q.iter().chain(&state.qdot).chain(q_target).all(|v| v.is_finite()) {
        return Err(ControlError::NonFinite);
    }
    let err: Vec<f64> = q_target.iter().zip(&state.q).map(|(t, q)| t - q).collect();
    let capped = robust_cap(&err, gains.theta_cap);
    Ok(capped
        .iter()
        .zip(&state.qdot)
        .map(|(e, v)| gains.kp * e - gains.kd * v)
        .collect())
}

/// One integration step under constant `qddot`; joints that hit a limit are
/// stopped there.
pub fn step_virtual_arm(state: &JointState, qddot: &[f64], dt: f64, limits: &[(f64, f64)]) -> JointState {
    let mut next = state.clone();
    for i in 0..state.dof() {
        let a = qddot[i];
        let mut q = state.q[i] + state.qdot[i] * dt + 0.5 * a * dt * dt;
        let mut v = state.qdot[i] + a * dt;
        if let Some(&(lo, hi)) = limits.get(i) {
            if q <= lo || q >= hi {
                q = q.clamp(lo, hi);
                v = 0.0;
            }
        }
        next.q[i] = q;
        next.qdot[i] = v;
        next.qddot[i] = a;
    }
    next
}

/// Drives a virtual arm toward `q_target` for `substeps` steps of `dt / substeps`.
pub fn advance_virtual_arm(
    state: &JointState,
    q_target: &[f64],
    gains: &ControllerGains,
    dt: f64,
    substeps: u32,
    limits: &[(f64, f64)],
) -> Result<JointState> {
    let h = dt / substeps as f64;
    let mut s = state.clone();
    for _ in 0..substeps {
        let a = compute_accel(&s, q_target, gains)?;
        s = step_virtual_arm(&s, &a, h, limits);
    }
    Ok(s)
}

/// Blends fresh commands with the previous output for `t_duration` ticks
/// after a discontinuity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmootherState {
    pub last_command: Option<Vec<f64>>,
    last_raw: Option<Vec<f64>>,
    pub alpha: f64,
    /// Tick at which the current smoothing window started.
    pub start: Tick,
    pub t_duration: Tick,
    pub discontinuity: f64,
}

impl SmootherState {
    pub fn new(t_duration: Tick, discontinuity: f64, start: Tick) -> Result<Self> {
        if t_duration == 0 {
            return Err(ControlError::Config("smoother duration must be positive".into()));
        }
        Ok(Self {
            last_command: None,
            last_raw: None,
            alpha: 0.0,
            start,
            t_duration,
            discontinuity,
        })
    }

    pub fn t_elapsed(&self, now: Tick) -> Tick {
        now.saturating_sub(self.start)
    }
}

/// `α · last + (1 − α) · raw`.
pub fn blend(last: &[f64], raw: &[f64], alpha: f64) -> Vec<f64> {
    last.iter()
        .zip(raw)
        .map(|(l, r)| alpha * l + (1.0 - alpha) * r)
        .collect()
}

/// Smooths `raw` at tick `now`. Within the window `α = (t_e / t_d)²`; after it
/// the raw command passes through. A jump above the discontinuity threshold in
/// any joint restarts the window.
pub fn smooth_command(s: &mut SmootherState, raw: &[f64], now: Tick) -> Vec<f64> {
    if let Some(prev) = &s.last_raw {
        if prev.iter().zip(raw).any(|(p, r)| (r - p).abs() > s.discontinuity) {
            s.start = now;
        }
    }
    s.last_raw = Some(raw.to_vec());
    let t_e = s.t_elapsed(now);
    let out = match &s.last_command {
        Some(last) if t_e < s.t_duration => {
            let r = t_e as f64 / s.t_duration as f64;
            s.alpha = r * r;
            blend(last, raw, s.alpha)
        }
        _ => {
            s.alpha = 0.0;
            raw.to_vec()
        }
    };
    s.last_command = Some(out.clone());
    out
}

/// `steps` evenly spaced commands from just after `prev` up to exactly `next`.
pub fn interpolate_commands(prev: &[f64], next: &[f64], steps: usize) -> Result<Vec<Vec<f64>>> {
    if steps == 0 {
        return Err(ControlError::Config("interpolation needs at least one step".into()));
    }
    check_len(prev.len(), next.len())?;
    let mut out = Vec::with_capacity(steps);
    for k in 1..steps {
        let f = k as f64 / steps as f64;
        out.push(prev.iter().zip(next).map(|(p, n)| p + f * (n - p)).collect());
    }
    out.push(next.to_vec());
    Ok(out)
}

/// Rate-limited joint tracker standing in for the real manipulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealArmModel {
    pub state: JointState,
    pub vmax: f64,
    pub amax: f64,
    pub control_period: Tick,
    pub limits: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    /// The target lay outside the joint limits and was clamped.
    pub clamped: bool,
}

impl RealArmModel {
    pub fn new(q: Vec<f64>, cfg: &RealArmConfig, limits: Vec<(f64, f64)>) -> Self {
        Self {
            state: JointState::at_rest(q),
            vmax: cfg.vmax,
            amax: cfg.amax,
            control_period: cfg.control_period_ms,
            limits,
        }
    }

    /// Largest speed from which the joint can still stop within `dist` using
    /// whole steps of deceleration `amax`.
    fn stopping_speed(&self, dist: f64, dt: f64) -> f64 {
        if self.amax.is_infinite() {
            return f64::INFINITY;
        }
        let adt = self.amax * dt;
        0.5 * adt * (-1.0 + (1.0 + 8.0 * dist / (adt * dt)).sqrt())
    }
}

/// Advances the real arm one control step of `dt` seconds toward `target_q`.
pub fn step_real_arm(model: &mut RealArmModel, target_q: &[f64], dt: f64) -> StepReport {
    let mut report = StepReport::default();
    for i in 0..model.state.dof() {
        let mut target = target_q[i];
        if let Some(&(lo, hi)) = model.limits.get(i) {
            let c = target.clamp(lo, hi);
            if c != target {
                report.clamped = true;
                target = c;
            }
        }
        let q = model.state.q[i];
        let v = model.state.qdot[i];
        let e = target - q;
        let dist = e.abs();
        let v_des = e.signum() * model.vmax.min(model.stopping_speed(dist, dt)).min(dist / dt);
        let dv_max = model.amax * dt;
        let v_new = v + (v_des - v).clamp(-dv_max, dv_max);
        let reaches = v_new == v_des && v_des.abs() * dt >= dist;
        let mut q_new = if reaches { target } else { q + v_new * dt };
        // the last braking step can overshoot by a fraction of `amax·dt²`;
        // the joint limits act as hard stops
        if let Some(&(lo, hi)) = model.limits.get(i) {
            q_new = q_new.clamp(lo, hi);
        }
        model.state.q[i] = q_new;
        model.state.qddot[i] = (v_new - v) / dt;
        model.state.qdot[i] = v_new;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cap_examples() {
        assert_eq!(robust_cap(&[0.1, 0.0], 1.0), vec![0.1, 0.0]);
        assert_eq!(robust_cap(&[2.0, 0.0], 1.0), vec![1.0, 0.0]);
        assert_eq!(robust_cap(&[0.0, 0.0], 1.0), vec![0.0, 0.0]);
    }

    #[test]
    fn accel_examples() {
        let g = ControllerGains {
            kp: 10.0,
            kd: 2.0,
            theta_cap: 1.0,
        };
        let s = JointState::at_rest(vec![0.0]);
        assert_eq!(compute_accel(&s, &[0.0], &g).unwrap(), vec![0.0]);
        assert_eq!(compute_accel(&s, &[0.5], &g).unwrap(), vec![5.0]);
        let moving = JointState {
            qdot: vec![1.0],
            ..s.clone()
        };
        assert_eq!(compute_accel(&moving, &[3.0], &g).unwrap(), vec![8.0]);
        assert_eq!(compute_accel(&s, &[f64::NAN], &g), Err(ControlError::NonFinite));
    }

    #[test]
    fn virtual_step_examples() {
        let s = JointState::at_rest(vec![0.2]);
        assert_eq!(step_virtual_arm(&s, &[0.0], 0.01, &[]).q, vec![0.2]);
        let moving = JointState {
            q: vec![0.0],
            qdot: vec![1.0],
            qddot: vec![0.0],
        };
        assert!((step_virtual_arm(&moving, &[0.0], 0.01, &[]).q[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn constant_accel_matches_closed_form() {
        let mut s = JointState::at_rest(vec![0.0]);
        let (a, dt, n) = (3.0, 0.002, 500);
        for _ in 0..n {
            s = step_virtual_arm(&s, &[a], dt, &[]);
        }
        let t = dt * n as f64;
        assert!((s.q[0] - 0.5 * a * t * t).abs() < 1e-12);
        assert!((s.qdot[0] - a * t).abs() < 1e-12);
    }

    #[test]
    fn limit_stops_the_joint() {
        let s = JointState {
            q: vec![0.99],
            qdot: vec![5.0],
            qddot: vec![0.0],
        };
        let n = step_virtual_arm(&s, &[0.0], 0.01, &[(-1.0, 1.0)]);
        assert_eq!(n.q, vec![1.0]);
        assert_eq!(n.qdot, vec![0.0]);
    }

    #[test]
    fn smoother_blend_examples() {
        assert_eq!(blend(&[0.3], &[0.7], 0.0), vec![0.7]);
        assert_eq!(blend(&[0.3], &[0.7], 1.0), vec![0.3]);
        assert_eq!(blend(&[0.0], &[1.0], 0.5), vec![0.5]);
    }

    #[test]
    fn smoother_schedule() {
        let mut s = SmootherState::new(10, 0.1, 0).unwrap();
        assert_eq!(smooth_command(&mut s, &[0.0], 0), vec![0.0]);
        // α = (5/10)² = 0.25
        let out = smooth_command(&mut s, &[0.08], 5);
        assert!((out[0] - 0.75 * 0.08).abs() < 1e-15);
        assert_eq!(s.alpha, 0.25);
        // past the window the raw command passes through
        assert_eq!(smooth_command(&mut s, &[0.09], 10), vec![0.09]);
        // a jump restarts the window, whose first command is the raw one
        assert_eq!(smooth_command(&mut s, &[1.0], 20), vec![1.0]);
        assert_eq!(s.start, 20);
        let out = smooth_command(&mut s, &[1.05], 25);
        assert!((out[0] - (0.25 * 1.0 + 0.75 * 1.05)).abs() < 1e-15);
        assert!(SmootherState::new(0, 0.1, 0).is_err());
    }

    #[test]
    fn interpolation_examples() {
        assert_eq!(interpolate_commands(&[0.0], &[1.0], 1).unwrap(), vec![vec![1.0]]);
        assert_eq!(
            interpolate_commands(&[0.0], &[1.0], 4).unwrap(),
            vec![vec![0.25], vec![0.5], vec![0.75], vec![1.0]]
        );
        assert!(interpolate_commands(&[0.4], &[0.4], 3)
            .unwrap()
            .iter()
            .all(|c| c == &vec![0.4]));
        assert!(interpolate_commands(&[0.0], &[1.0], 0).is_err());
    }

    #[test]
    fn real_arm_examples() {
        let cfg = RealArmConfig {
            vmax: 1.0,
            amax: f64::INFINITY,
            control_period_ms: 1,
        };
        let mut arm = RealArmModel::new(vec![0.0], &cfg, vec![]);
        step_real_arm(&mut arm, &[0.0], 0.1);
        assert_eq!(arm.state.q, vec![0.0]);
        step_real_arm(&mut arm, &[1.0], 0.1);
        assert!((arm.state.q[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn real_arm_reports_clamped_target() {
        let mut arm = RealArmModel::new(vec![0.0], &RealArmConfig::default(), vec![(-1.0, 1.0)]);
        assert!(step_real_arm(&mut arm, &[2.0], 0.002).clamped);
        assert!(!step_real_arm(&mut arm, &[0.5], 0.002).clamped);
    }

    #[test]
    fn config_validation() {
        assert!(ControllerConfig::default().validate().is_ok());
        let bad = ControllerConfig {
            kp: 0.0,
            ..ControllerConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
