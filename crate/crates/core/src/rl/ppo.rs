use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::{clip_grad_norm, Adam, Mlp};
use super::{PpoConfig, RlError};
use crate::pipeline::{EnvAction, EnvState, HorizonBounds, HorizonPolicy};

/// Network input: the normalized pose followed by AoL scaled by the larger
/// horizon bound.
pub const INPUT_DIM: usize = 8;

pub fn features(s: &EnvState, bounds: &HorizonBounds) -> [f64; INPUT_DIM] {
    let mut x = [0.0; INPUT_DIM];
    x[..7].copy_from_slice(&s.pose);
    x[7] = s.aol as f64 / bounds.h_r_max.max(bounds.h_c_max).max(1) as f64;
    x
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

fn sample_categorical<R: Rng>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, l) in logp.iter().enumerate() {
        acc += l.exp();
        if u < acc {
            return i;
        }
    }
    logp.len() - 1
}

/// Clipped surrogate `min(ρ·A, clip(ρ, 1-ε, 1+ε)·A)` for one sample.
pub fn surrogate(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Policy network with two independent categorical heads over horizons
/// `0..=H_r_max` and `0..=H_c_max`, and a separate value network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActorCritic {
    pub bounds: HorizonBounds,
    pub policy: Mlp,
    pub value: Mlp,
}

/// One sampled decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampled {
    pub action: EnvAction,
    pub log_prob: f64,
    pub value: f64,
    pub features: [f64; INPUT_DIM],
}

impl ActorCritic {
    pub fn new<R: Rng>(bounds: HorizonBounds, hidden: &[usize], rng: &mut R) -> Self {
        let heads = (bounds.h_r_max + bounds.h_c_max + 2) as usize;
        let sizes = |out: usize| {
            let mut s = vec![INPUT_DIM];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        // small policy output keeps the initial distribution near uniform
        let policy = Mlp::new(&sizes(heads), 0.01, rng);
        let value = Mlp::new(&sizes(1), 1.0, rng);
        Self { bounds, policy, value }
    }

    fn n_r(&self) -> usize {
        self.bounds.h_r_max as usize + 1
    }

    /// Log-probabilities of both heads.
    pub fn log_probs(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let z = self.policy.forward(x);
        let (r, c) = z.split_at(self.n_r());
        (log_softmax(r), log_softmax(c))
    }

    pub fn value_of(&self, x: &[f64]) -> f64 {
        self.value.forward(x)[0]
    }

    pub fn sample<R: Rng>(&self, s: &EnvState, rng: &mut R) -> Sampled {
        let x = features(s, &self.bounds);
        let (lr, lc) = self.log_probs(&x);
        let (a_r, a_c) = (sample_categorical(&lr, rng), sample_categorical(&lc, rng));
        Sampled {
            action: EnvAction::new(a_r as u64, a_c as u64),
            log_prob: lr[a_r] + lc[a_c],
            value: self.value_of(&x),
            features: x,
        }
    }

    /// Most probable horizon of each head.
    pub fn greedy(&self, s: &EnvState) -> EnvAction {
        let (lr, lc) = self.log_probs(&features(s, &self.bounds));
        EnvAction::new(argmax(&lr) as u64, argmax(&lc) as u64)
    }

    pub fn is_finite(&self) -> bool {
        self.policy
            .params()
            .iter()
            .chain(self.value.params())
            .all(|p| p.is_finite())
    }
}

/// Greedy policy of a trained agent.
pub struct LearnedPolicy {
    agent: ActorCritic,
    label: String,
}

impl LearnedPolicy {
    pub fn new(agent: ActorCritic, label: impl Into<String>) -> Self {
        Self {
            agent,
            label: label.into(),
        }
    }
}

impl HorizonPolicy for LearnedPolicy {
    fn decide(&mut self, state: &EnvState) -> EnvAction {
        self.agent.greedy(state)
    }

    fn label(&self) -> String {
        self.label.clone()
    }
}

/// Transitions of one episode, in order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub features: Vec<[f64; INPUT_DIM]>,
    pub actions: Vec<EnvAction>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub rewards: Vec<f64>,
    /// Value of the state after the last transition; zero when terminal.
    pub bootstrap: f64,
}

impl Trajectory {
    pub fn push(&mut self, s: &Sampled, reward: f64) {
        self.features.push(s.features);
        self.actions.push(s.action);
        self.log_probs.push(s.log_prob);
        self.values.push(s.value);
        self.rewards.push(reward);
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Generalized advantage estimates and the matching value targets.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Mean `|ρ - 1| > ε` rate over the last epoch.
    pub clip_fraction: f64,
    pub approx_kl: f64,
}

/// Optimizer state of both networks.
#[derive(Debug, Clone)]
pub struct PpoOptimizer {
    policy: Adam,
    value: Adam,
}

impl PpoOptimizer {
    pub fn new(agent: &ActorCritic) -> Self {
        Self {
            policy: Adam::new(agent.policy.params().len()),
            value: Adam::new(agent.value.params().len()),
        }
    }
}

/// One PPO update over a batch of trajectories: GAE advantages, then
/// `epochs` passes of clipped-surrogate ascent over shuffled minibatches.
///
/// On a non-finite loss or parameter the agent is restored to its state
/// before the update and an error is returned.
pub fn ppo_update<R: Rng>(
    agent: &mut ActorCritic,
    opt: &mut PpoOptimizer,
    batch: &[Trajectory],
    cfg: &PpoConfig,
    lr: f64,
    rng: &mut R,
) -> Result<UpdateStats, RlError> {
    let mut x = Vec::new();
    let mut actions = Vec::new();
    let mut old_logp = Vec::new();
    let mut adv = Vec::new();
    let mut ret = Vec::new();
    for tr in batch.iter().filter(|t| !t.is_empty()) {
        let (a, r) = gae(&tr.rewards, &tr.values, tr.bootstrap, cfg.gamma, cfg.gae_lambda);
        x.extend_from_slice(&tr.features);
        actions.extend_from_slice(&tr.actions);
        old_logp.extend_from_slice(&tr.log_probs);
        adv.extend(a);
        ret.extend(r);
    }
    let n = x.len();
    if n == 0 {
        return Ok(UpdateStats::default());
    }
    let mean = adv.iter().sum::<f64>() / n as f64;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if std > 1e-12 {
        adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
    } else {
        adv.iter_mut().for_each(|a| *a -= mean);
    }

    let backup = agent.clone();
    let n_r = agent.n_r();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut pg = vec![0.0; agent.policy.params().len()];
    let mut vg = vec![0.0; agent.value.params().len()];
    for _ in 0..cfg.epochs {
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        stats = UpdateStats::default();
        for mb in order.chunks(cfg.minibatch) {
            pg.iter_mut().for_each(|g| *g = 0.0);
            vg.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / mb.len() as f64;
            for &i in mb {
                let tape = agent.policy.forward_tape(&x[i]);
                let (zr, zc) = tape.output().split_at(n_r);
                let (lr_, lc_) = (log_softmax(zr), log_softmax(zc));
                let (ar, ac) = (actions[i].h_r as usize, actions[i].h_c as usize);
                let logp = lr_[ar] + lc_[ac];
                let ratio = (logp - old_logp[i]).exp();
                let a = adv[i];
                let surr = surrogate(ratio, a, cfg.clip);
                let unclipped = ratio * a <= ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip) * a;
                let ent_r = -lr_.iter().map(|l| l.exp() * l).sum::<f64>();
                let ent_c = -lc_.iter().map(|l| l.exp() * l).sum::<f64>();
                stats.policy_loss -= surr * scale;
                stats.entropy += (ent_r + ent_c) * scale;
                stats.approx_kl += (old_logp[i] - logp) * scale;
                if (ratio - 1.0).abs() > cfg.clip {
                    stats.clip_fraction += scale;
                }

                // d(-surr)/dz = -ρA (onehot - p) when the unclipped term is active;
                // d(-c·H)/dz_k = c·p_k (log p_k + H)
                let g_lp = if unclipped { -ratio * a } else { 0.0 };
                let mut dz = vec![0.0; zr.len() + zc.len()];
                let heads = [(&lr_, ar, ent_r, 0), (&lc_, ac, ent_c, n_r)];
                for (lp, act, ent, off) in heads {
                    for (k, l) in lp.iter().enumerate() {
                        let p = l.exp();
                        let onehot = if k == act { 1.0 } else { 0.0 };
                        dz[off + k] = scale * (g_lp * (onehot - p) + cfg.entropy_coef * p * (l + ent));
                    }
                }
                agent.policy.backward(&tape, &dz, &mut pg);

                let vt = agent.value.forward_tape(&x[i]);
                let err = vt.output()[0] - ret[i];
                stats.value_loss += err * err * scale;
                agent
                    .value
                    .backward(&vt, &[2.0 * cfg.value_coef * err * scale], &mut vg);
            }
            if !(stats.policy_loss.is_finite() && stats.value_loss.is_finite()) {
                *agent = backup;
                return Err(RlError::Diverged(format!(
                    "non-finite loss (policy {}, value {})",
                    stats.policy_loss, stats.value_loss
                )));
            }
            clip_grad_norm(&mut pg, cfg.max_grad_norm);
            clip_grad_norm(&mut vg, cfg.max_grad_norm);
            opt.policy.step(agent.policy.params_mut(), &pg, lr);
            opt.value.step(agent.value.params_mut(), &vg, lr);
        }
        let batches = n.div_ceil(cfg.minibatch) as f64;
        stats.policy_loss /= batches;
        stats.value_loss /= batches;
        stats.entropy /= batches;
        stats.approx_kl /= batches;
        stats.clip_fraction /= batches;
    }
    if !agent.is_finite() {
        *agent = backup;
        return Err(RlError::Diverged("non-finite parameters after update".into()));
    }
    Ok(stats)
}
