//! Closed-loop teleoperation simulator with latency compensation.

pub mod control;
pub mod kinematics;
pub mod model;
pub mod pipeline;
pub mod predictor;
pub mod rl;
