use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, Phase};
use super::curve::{has_plateaued, write_curve, CurveRow};
use super::env::Env;
use super::ppo::{ppo_update, ActorCritic, PpoOptimizer, Sampled, Trajectory, UpdateStats};
use super::{PpoConfig, RlError};
use crate::model::{rmse_orientation, rmse_position, Tick};
use crate::pipeline::{
    mix_seed, EnvAction, EnvState, EpisodeLog, FixedPolicy, HorizonBounds, HorizonPolicy, Scenario, SourceSpec,
    TrajectorySource,
};

pub const CURVE_FILE: &str = "training_curve.csv";

pub fn checkpoint_file(phase: Phase) -> String {
    format!("checkpoint-{}.bin", phase.label())
}

/// Source of human-driven episodes for the second training phase.
pub trait LiveFeed {
    /// Operator motion for the next episode; `None` once the feed is gone.
    fn next_episode(&mut self) -> Option<Box<dyn TrajectorySource>>;
}

/// PPO learner that collects transitions one decision at a time.
///
/// Drives offline episodes itself through [`Trainer::run_episode`], or is
/// fed by a live session through `sample`, `record` and `end_episode`.
pub struct Trainer {
    agent: ActorCritic,
    opt: PpoOptimizer,
    cfg: PpoConfig,
    seed: u64,
    rng: ChaCha8Rng,
    phase: Phase,
    current: Trajectory,
    rewards: Vec<f64>,
    batch: Vec<Trajectory>,
    episodes: usize,
    curve: Vec<CurveRow>,
    last_update: Option<UpdateStats>,
}

impl Trainer {
    pub fn new(cfg: PpoConfig, bounds: HorizonBounds, seed: u64) -> Result<Self, RlError> {
        cfg.validate().map_err(RlError::Config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let agent = ActorCritic::new(bounds, &cfg.hidden, &mut rng);
        Ok(Self::with_agent(agent, cfg, seed, rng, Phase::Recorded, 0))
    }

    /// Continues from a checkpoint with fresh optimizer state.
    pub fn resume(ck: Checkpoint, cfg: PpoConfig, seed: u64) -> Result<Self, RlError> {
        cfg.validate().map_err(RlError::Config)?;
        let rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, ck.header.episodes as u64));
        Ok(Self::with_agent(
            ck.agent,
            cfg,
            seed,
            rng,
            ck.header.phase,
            ck.header.episodes,
        ))
    }

    fn with_agent(
        agent: ActorCritic,
        cfg: PpoConfig,
        seed: u64,
        rng: ChaCha8Rng,
        phase: Phase,
        episodes: usize,
    ) -> Self {
        Self {
            opt: PpoOptimizer::new(&agent),
            agent,
            cfg,
            seed,
            rng,
            phase,
            current: Trajectory::default(),
            rewards: Vec::new(),
            batch: Vec::new(),
            episodes,
            curve: Vec::new(),
            last_update: None,
        }
    }

    pub fn agent(&self) -> &ActorCritic {
        &self.agent
    }

    pub fn config(&self) -> &PpoConfig {
        &self.cfg
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Switches phase; later updates use the phase's learning rate.
    pub fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
    }

    pub fn learning_rate(&self) -> f64 {
        match self.phase {
            Phase::Recorded => self.cfg.learning_rate,
            Phase::Hitl => self.cfg.learning_rate * self.cfg.hitl_lr_scale,
        }
    }

    pub fn episodes(&self) -> usize {
        self.episodes
    }

    pub fn curve(&self) -> &[CurveRow] {
        &self.curve
    }

    pub fn last_update(&self) -> Option<UpdateStats> {
        self.last_update
    }

    /// Draws an action for `state` from the current policy.
    pub fn sample(&mut self, state: &EnvState) -> Sampled {
        self.agent.sample(state, &mut self.rng)
    }

    /// Stores a transition of the episode in progress.
    pub fn record(&mut self, s: &Sampled, reward: f64) {
        self.current.push(s, reward);
        self.rewards.push(reward);
    }

    /// Drops the episode in progress.
    pub fn discard_episode(&mut self) {
        self.current = Trajectory::default();
        self.rewards.clear();
    }

    /// Closes the episode in progress and updates once enough episodes are
    /// batched. `last` is the state after the final transition when the
    /// episode was cut by its time limit.
    pub fn end_episode(&mut self, last: Option<&EnvState>, log: &EpisodeLog) -> Result<CurveRow, RlError> {
        let mut tr = std::mem::take(&mut self.current);
        if tr.is_empty() {
            return Err(RlError::Config("episode has no decisions".into()));
        }
        tr.bootstrap = last.map_or(0.0, |s| {
            self.agent.value_of(&super::ppo::features(s, &self.agent.bounds))
        });
        let mean_reward = self.rewards.iter().sum::<f64>() / self.rewards.len() as f64;
        self.rewards.clear();
        self.episodes += 1;
        let row = CurveRow {
            episode: self.episodes,
            mean_reward,
            rmse_p_om: rmse_position(&log.operator, &log.virtual_pose)?,
            rmse_p_mr: rmse_position(&log.virtual_pose, &log.real)?,
            rmse_o_om: rmse_orientation(&log.operator, &log.virtual_pose)?,
            rmse_o_mr: rmse_orientation(&log.virtual_pose, &log.real)?,
        };
        self.curve.push(row);
        self.batch.push(tr);
        if self.batch.len() >= self.cfg.episodes_per_update {
            self.update()?;
        }
        Ok(row)
    }

    /// Runs a PPO update on whatever is batched.
    pub fn update(&mut self) -> Result<(), RlError> {
        if self.batch.is_empty() {
            return Ok(());
        }
        let batch = std::mem::take(&mut self.batch);
        let lr = self.learning_rate();
        let stats = ppo_update(&mut self.agent, &mut self.opt, &batch, &self.cfg, lr, &mut self.rng)?;
        log::debug!(
            "update after episode {}: policy {:.4} value {:.3e} entropy {:.3} kl {:.4} clipped {:.2}",
            self.episodes,
            stats.policy_loss,
            stats.value_loss,
            stats.entropy,
            stats.approx_kl,
            stats.clip_fraction
        );
        self.last_update = Some(stats);
        Ok(())
    }

    /// Runs one training episode offline. Returns `None` when the operator
    /// feed disconnected and the episode was discarded.
    pub fn run_episode(
        &mut self,
        sc: &Scenario,
        source: Box<dyn TrajectorySource>,
    ) -> Result<Option<CurveRow>, RlError> {
        let mut env = Env::new(sc, source)?;
        let mut state = env.observe();
        while !env.is_done() {
            let s = self.sample(&state);
            let step = env.step(s.action)?;
            self.record(&s, step.reward);
            state = step.state;
        }
        if env.simulator().source_disconnected() {
            log::warn!("operator feed disconnected mid-episode; discarding it");
            self.discard_episode();
            return Ok(None);
        }
        let log = env.finish();
        self.end_episode(Some(&state), &log).map(Some)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            self.agent.clone(),
            self.phase,
            self.episodes,
            self.seed,
            self.cfg.clone(),
        )
    }

    pub fn policy(&self) -> super::LearnedPolicy {
        super::LearnedPolicy::new(self.agent.clone(), format!("learned:{}", self.phase.label()))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub agent: ActorCritic,
    /// Phase of the returned parameters.
    pub phase: Phase,
    pub curve: Vec<CurveRow>,
    pub checkpoints: Vec<PathBuf>,
    /// Episode at which the windowed mean reward first plateaued.
    pub plateau_at: Option<usize>,
    /// Live episodes thrown away after a disconnect.
    pub discarded: usize,
}

/// Scenario of training episode `episode`: the episode length and a seed
/// derived from the base seed.
pub fn episode_scenario(sc: &Scenario, duration_ms: u64, episode: usize) -> Scenario {
    Scenario {
        seed: mix_seed(sc.seed, episode as u64),
        duration_ms,
        ..sc.clone()
    }
}

fn save(trainer: &Trainer, out: Option<&Path>, saved: &mut Vec<PathBuf>) -> Result<(), RlError> {
    let Some(dir) = out else { return Ok(()) };
    let path = dir.join(checkpoint_file(trainer.phase()));
    trainer.checkpoint().save(&path)?;
    write_curve(&dir.join(CURVE_FILE), trainer.curve())?;
    if !saved.contains(&path) {
        saved.push(path);
    }
    Ok(())
}

/// Trains first on the recorded set, cycling through it episode by episode,
/// then, when a live feed is attached, fine-tunes on human-driven episodes
/// at the reduced learning rate. With `out`, a checkpoint and the curve are
/// written after each phase, and the last good parameters are saved if an
/// update diverges.
pub fn train_two_step(
    sc: &Scenario,
    cfg: &PpoConfig,
    recorded: &[SourceSpec],
    live: Option<&mut dyn LiveFeed>,
    out: Option<&Path>,
) -> Result<TrainOutcome, RlError> {
    if recorded.is_empty() {
        return Err(RlError::Config("the recorded training set is empty".into()));
    }
    if recorded.iter().any(|s| matches!(s, SourceSpec::Live)) {
        return Err(RlError::Config(
            "the recorded training set cannot contain a live source".into(),
        ));
    }
    let mut trainer = Trainer::new(cfg.clone(), sc.horizons, sc.seed)?;
    let chain = sc.chain()?;
    let home = chain.forward_kinematics(&chain.home())?;
    let mut saved = Vec::new();
    let mut plateau_at = None;

    let guard = |trainer: &Trainer, saved: &mut Vec<PathBuf>, e: RlError| -> RlError {
        if matches!(e, RlError::Diverged(_)) {
            if let Err(io) = save(trainer, out, saved) {
                log::error!("could not save the last good checkpoint: {io}");
            }
        }
        e
    };

    for i in 0..cfg.episodes {
        let esc = episode_scenario(sc, cfg.episode_ms, i);
        let source = recorded[i % recorded.len()].build(&home, esc.seed, None)?;
        let row = match trainer.run_episode(&esc, source) {
            Ok(r) => r,
            Err(e) => return Err(guard(&trainer, &mut saved, e)),
        };
        if let Some(r) = row {
            log::info!(
                "episode {} mean reward {:.5} rmse_p_om {:.4}",
                r.episode,
                r.mean_reward,
                r.rmse_p_om
            );
        }
        let rewards: Vec<f64> = trainer.curve().iter().map(|r| r.mean_reward).collect();
        if plateau_at.is_none() && has_plateaued(&rewards, cfg.plateau_window, cfg.plateau_tol) {
            plateau_at = Some(trainer.episodes());
            log::info!("windowed mean reward plateaued at episode {}", trainer.episodes());
            if cfg.stop_on_plateau {
                break;
            }
        }
    }
    trainer.update().map_err(|e| guard(&trainer, &mut saved, e))?;
    save(&trainer, out, &mut saved)?;

    let mut discarded = 0;
    if let Some(feed) = live {
        trainer.set_phase(Phase::Hitl);
        let mut done = 0;
        while done < cfg.hitl_episodes {
            let Some(source) = feed.next_episode() else {
                log::warn!("live feed closed after {done} fine-tuning episodes");
                break;
            };
            let esc = episode_scenario(sc, cfg.hitl_episode_ms, trainer.episodes() + discarded);
            match trainer.run_episode(&esc, source) {
                Ok(Some(_)) => done += 1,
                Ok(None) => discarded += 1,
                Err(e) => return Err(guard(&trainer, &mut saved, e)),
            }
        }
        trainer.update().map_err(|e| guard(&trainer, &mut saved, e))?;
        if done > 0 {
            save(&trainer, out, &mut saved)?;
        } else {
            trainer.set_phase(Phase::Recorded);
        }
    }

    Ok(TrainOutcome {
        agent: trainer.agent.clone(),
        phase: trainer.phase(),
        curve: trainer.curve.clone(),
        checkpoints: saved,
        plateau_at,
        discarded,
    })
}

/// Mean per-decision reward of a policy and the episode summaries.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean_reward: f64,
    pub rows: Vec<CurveRow>,
}

/// Runs `episodes` seeded evaluation episodes of `sc` under `policy`.
/// Episode `k` uses the same seed for every policy, so evaluations are
/// paired.
pub fn evaluate_policy(sc: &Scenario, policy: &mut dyn HorizonPolicy, episodes: usize) -> Result<Evaluation, RlError> {
    let chain = sc.chain()?;
    let home = chain.forward_kinematics(&chain.home())?;
    let mut rows = Vec::with_capacity(episodes);
    for k in 0..episodes {
        let esc = Scenario {
            seed: mix_seed(sc.seed, u64::MAX - k as u64),
            ..sc.clone()
        };
        let source = esc.source.build(&home, esc.seed, None)?;
        let mut env = Env::new(&esc, source)?;
        let mut rewards = Vec::new();
        while !env.is_done() {
            let a = policy.decide(&env.observe());
            rewards.push(env.step(a)?.reward);
        }
        let log = env.finish();
        rows.push(CurveRow {
            episode: k + 1,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len().max(1) as f64,
            rmse_p_om: rmse_position(&log.operator, &log.virtual_pose)?,
            rmse_p_mr: rmse_position(&log.virtual_pose, &log.real)?,
            rmse_o_om: rmse_orientation(&log.operator, &log.virtual_pose)?,
            rmse_o_mr: rmse_orientation(&log.virtual_pose, &log.real)?,
        });
    }
    let mean_reward = rows.iter().map(|r| r.mean_reward).sum::<f64>() / rows.len().max(1) as f64;
    Ok(Evaluation { mean_reward, rows })
}

/// Result of one fixed horizon in a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub horizon: Tick,
    pub eval: Evaluation,
}

impl SweepPoint {
    /// Means of the per-episode errors.
    pub fn mean_row(&self) -> CurveRow {
        let n = self.eval.rows.len().max(1) as f64;
        let mean = |f: fn(&CurveRow) -> f64| self.eval.rows.iter().map(f).sum::<f64>() / n;
        CurveRow {
            episode: self.eval.rows.len(),
            mean_reward: self.eval.mean_reward,
            rmse_p_om: mean(|r| r.rmse_p_om),
            rmse_p_mr: mean(|r| r.rmse_p_mr),
            rmse_o_om: mean(|r| r.rmse_o_om),
            rmse_o_mr: mean(|r| r.rmse_o_mr),
        }
    }
}

/// Evaluates `fixed:h` for every horizon, on paired seeds.
pub fn sweep_fixed(
    sc: &Scenario,
    horizons: impl IntoIterator<Item = Tick>,
    episodes: usize,
) -> Result<Vec<SweepPoint>, RlError> {
    horizons
        .into_iter()
        .map(|h| {
            let eval = evaluate_policy(sc, &mut FixedPolicy(EnvAction::same(h)), episodes)?;
            log::info!("fixed:{h} mean reward {:.5}", eval.mean_reward);
            Ok(SweepPoint { horizon: h, eval })
        })
        .collect()
}

/// The sweep point with the highest mean reward; ties go to the smaller
/// horizon.
pub fn best_of(points: &[SweepPoint]) -> Option<&SweepPoint> {
    points.iter().fold(None, |best: Option<&SweepPoint>, p| match best {
        Some(b) if b.eval.mean_reward >= p.eval.mean_reward => Some(b),
        _ => Some(p),
    })
}
