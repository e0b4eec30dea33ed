use serde::{Deserialize, Serialize};

/// Weights of the four RMSE terms in the reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    /// Position, operator vs virtual.
    pub w1: f64,
    /// Position, virtual vs real.
    pub w2: f64,
    /// Orientation, operator vs virtual.
    pub w3: f64,
    /// Orientation, virtual vs real.
    pub w4: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            w1: -1.0,
            w2: -1.0,
            w3: -1.0,
            w4: -1.0,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), String> {
        if [self.w1, self.w2, self.w3, self.w4].iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err("reward weights must be finite".into())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub hidden: Vec<usize>,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    /// Phase-one episodes.
    pub episodes: usize,
    pub episode_ms: u64,
    /// Episodes per PPO update.
    pub episodes_per_update: usize,
    pub hitl_episodes: usize,
    pub hitl_episode_ms: u64,
    /// Learning-rate multiplier during human-in-the-loop fine-tuning.
    pub hitl_lr_scale: f64,
    /// Window of the moving mean used for the plateau test.
    pub plateau_window: usize,
    /// Relative change of the windowed mean below which training has
    /// plateaued.
    pub plateau_tol: f64,
    /// End the first phase as soon as the reward plateaus instead of
    /// running every configured episode.
    pub stop_on_plateau: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            gae_lambda: 0.9,
            clip: 0.2,
            learning_rate: 1e-3,
            epochs: 4,
            minibatch: 64,
            hidden: vec![64, 64],
            entropy_coef: 0.003,
            value_coef: 0.5,
            max_grad_norm: 1.0,
            episodes: 150,
            episode_ms: 10_000,
            episodes_per_update: 1,
            hitl_episodes: 20,
            hitl_episode_ms: 30_000,
            hitl_lr_scale: 0.1,
            plateau_window: 20,
            plateau_tol: 0.01,
            stop_on_plateau: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(format!("gae_lambda must lie in [0, 1], got {}", self.gae_lambda));
        }
        if !(self.clip > 0.0) {
            return Err("clip must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err("learning_rate must be positive".into());
        }
        if self.epochs == 0 || self.minibatch == 0 || self.episodes_per_update == 0 {
            return Err("epochs, minibatch and episodes_per_update must be positive".into());
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err("hidden layer widths must be positive".into());
        }
        if self.episode_ms == 0 || self.hitl_episode_ms == 0 {
            return Err("episode lengths must be positive".into());
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0 && self.max_grad_norm > 0.0) {
            return Err("entropy_coef, value_coef must be non-negative and max_grad_norm positive".into());
        }
        if !(self.hitl_lr_scale > 0.0) || self.plateau_window == 0 {
            return Err("hitl_lr_scale and plateau_window must be positive".into());
        }
        Ok(())
    }
}
