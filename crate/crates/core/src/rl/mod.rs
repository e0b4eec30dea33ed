//! Horizon-selection MDP and the PPO trainer.

mod checkpoint;
mod config;
mod curve;
mod env;
mod net;
mod ppo;
mod train;

use thiserror::Error;

pub use crate::pipeline::{EnvAction, EnvState};
pub use checkpoint::{Checkpoint, CheckpointHeader, Phase};
pub use config::{PpoConfig, RewardWeights};
pub use curve::{has_plateaued, read_curve, theil_sen_slope, windowed_mean, write_curve, CurveRow};
pub use env::{compute_reward, interval_reward, Env, Step};
pub use net::{clip_grad_norm, Adam, Mlp};
pub use ppo::{
    features, gae, ppo_update, surrogate, ActorCritic, LearnedPolicy, PpoOptimizer, Sampled, Trajectory, UpdateStats,
    INPUT_DIM,
};
pub use train::{
    best_of, checkpoint_file, episode_scenario, evaluate_policy, sweep_fixed, train_two_step, Evaluation, LiveFeed,
    SweepPoint, TrainOutcome, Trainer, CURVE_FILE,
};

use crate::model::ModelError;
use crate::pipeline::{FixedPolicy, HorizonPolicy, OraclePolicy, PipelineError, PolicySpec, Scenario, ZeroPolicy};

#[derive(Debug, Error)]
pub enum RlError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    /// A loss or parameter became non-finite; the update was rolled back.
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<ModelError> for RlError {
    fn from(e: ModelError) -> Self {
        RlError::Pipeline(e.into())
    }
}

impl From<crate::kinematics::KinematicsError> for RlError {
    fn from(e: crate::kinematics::KinematicsError) -> Self {
        RlError::Pipeline(e.into())
    }
}

/// Instantiates the policy a spec names; checkpoints are loaded from disk.
pub fn build_policy(spec: &PolicySpec, sc: &Scenario) -> Result<Box<dyn HorizonPolicy>, RlError> {
    Ok(match spec {
        PolicySpec::Zero => Box::new(ZeroPolicy),
        PolicySpec::Fixed(a) => Box::new(FixedPolicy(*a)),
        PolicySpec::Oracle => Box::new(OraclePolicy::for_scenario(sc)),
        PolicySpec::Checkpoint(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.header.bounds != sc.horizons {
                return Err(RlError::Checkpoint(format!(
                    "checkpoint horizon bounds {:?} differ from the scenario's {:?}",
                    ck.header.bounds, sc.horizons
                )));
            }
            Box::new(LearnedPolicy::new(ck.agent, format!("checkpoint:{}", path.display())))
        }
    })
}
