//! A toy dialogue environment and clipped policy-gradient updates against a
//! learned reward, regularized toward a frozen reference policy.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Speaker, Trajectory, Turn};
use crate::error::{Error, Result};
use crate::math::{self, ordered_sum, Rng};
use crate::reward_model::RewardModel;

/// Tabular softmax policy over `vocab_size` actions, conditioned on the last
/// `order` tokens of the dialogue. Missing history is padded with the token
/// `vocab_size`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub vocab_size: usize,
    pub order: usize,
    /// Row-major `contexts x vocab_size`.
    pub logits: Vec<f64>,
}

impl ToyPolicy {
    pub fn uniform(vocab_size: usize, order: usize) -> Self {
        let contexts = (vocab_size + 1).pow(order as u32);
        Self {
            vocab_size,
            order,
            logits: vec![0.0; contexts * vocab_size],
        }
    }

    pub fn context_count(&self) -> usize {
        self.logits.len() / self.vocab_size
    }

    /// Index of the context formed by the last `order` tokens of `history`.
    pub fn context_of(&self, history: &[usize]) -> usize {
        let base = self.vocab_size + 1;
        let mut c = 0;
        for back in (1..=self.order).rev() {
            let tok = if history.len() >= back {
                history[history.len() - back]
            } else {
                self.vocab_size
            };
            c = c * base + tok;
        }
        c
    }

    pub fn row(&self, context: usize) -> &[f64] {
        &self.logits[context * self.vocab_size..(context + 1) * self.vocab_size]
    }

    pub fn log_probs(&self, context: usize) -> Vec<f64> {
        let row = self.row(context);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|&l| libm::exp(l - max)).sum::<f64>());
        row.iter().map(|&l| l - lse).collect()
    }

    pub fn probs(&self, context: usize) -> Vec<f64> {
        self.log_probs(context).into_iter().map(libm::exp).collect()
    }

    pub fn log_prob(&self, context: usize, action: usize) -> f64 {
        self.log_probs(context)[action]
    }

    fn sample(&self, context: usize, rng: &mut Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let probs = self.probs(context);
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return a;
            }
        }
        // rounding left `acc` short of 1; take the last action with mass
        probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// `KL(p || q)` for one context.
pub fn context_kl(p: &ToyPolicy, q: &ToyPolicy, context: usize) -> f64 {
    let lp = p.log_probs(context);
    let lq = q.log_probs(context);
    ordered_sum(lp.iter().zip(&lq).map(|(&a, &b)| {
        let w = libm::exp(a);
        if w == 0.0 {
            0.0
        } else {
            w * (a - b)
        }
    }))
}

/// Mean exact KL over the contexts visited in `batch`.
pub fn policy_kl(policy: &ToyPolicy, reference: &ToyPolicy, batch: &[Rollout]) -> f64 {
    let mut m = math::RunningMean::default();
    for r in batch {
        for s in &r.steps {
            m.push(context_kl(policy, reference, s.context));
        }
    }
    m.mean().unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlConfig {
    pub kl_coefficient: f64,
    pub clip_range: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub episode_length: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub use_score_norm: bool,
    pub vocab_size: usize,
    pub context_order: usize,
    pub ppo_epochs: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            kl_coefficient: 0.05,
            clip_range: 0.2,
            learning_rate: 1.0,
            steps: 500,
            episode_length: 6,
            batch_size: 24,
            seed: 0,
            use_score_norm: true,
            vocab_size: 8,
            context_order: 1,
            ppo_epochs: 1,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |field, m: &str| Err(Error::validation(field, m));
        if !(self.clip_range > 0.0) {
            return fail("clip_range", "must be positive");
        }
        if !(self.kl_coefficient >= 0.0) || !self.kl_coefficient.is_finite() {
            return fail("kl_coefficient", "must be finite and non-negative");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail("learning_rate", "must be finite and positive");
        }
        if self.vocab_size < 2 {
            return fail("vocab_size", "needs at least two actions");
        }
        if self.episode_length == 0 || self.batch_size == 0 || self.ppo_epochs == 0 {
            return fail("episode_length", "episode_length, batch_size and ppo_epochs must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub user_token: usize,
    pub context: usize,
    pub action: usize,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub steps: Vec<Step>,
}

/// One episode. Each step the responder emits a uniform random token, then
/// the policy acts on the updated history. The responder and the policy draw
/// from separate streams, so the user side is fixed by `env_seed` alone.
pub fn rollout(policy: &ToyPolicy, env_seed: u64, episode_length: usize) -> Rollout {
    let mut user = math::rng(math::derive_seed(env_seed, b"user"));
    let mut acting = math::rng(math::derive_seed(env_seed, b"policy"));
    let mut history = Vec::with_capacity(2 * episode_length);
    let mut steps = Vec::with_capacity(episode_length);
    for _ in 0..episode_length {
        let u = user.random_range(0..policy.vocab_size);
        history.push(u);
        let context = policy.context_of(&history);
        let action = policy.sample(context, &mut acting);
        history.push(action);
        steps.push(Step {
            user_token: u,
            context,
            action,
            log_prob: policy.log_prob(context, action),
        });
    }
    Rollout { steps }
}

/// Per-step learned reward for the agent actions of a rollout.
pub trait StepReward {
    fn step_rewards(&self, rollout: &Rollout) -> Result<Vec<f64>>;
}

impl<F: Fn(&Rollout) -> Vec<f64>> StepReward for F {
    fn step_rewards(&self, rollout: &Rollout) -> Result<Vec<f64>> {
        Ok(self(rollout))
    }
}

/// Scores actions with a reward model by rendering the episode as a
/// dialogue of single-word turns.
#[derive(Debug, Clone)]
pub struct RewardModelScorer<'a> {
    pub model: &'a RewardModel,
    pub vocab: Vec<String>,
}

impl RewardModelScorer<'_> {
    pub fn dialogue(&self, rollout: &Rollout) -> Result<Trajectory> {
        let mut turns = Vec::with_capacity(2 * rollout.steps.len());
        for (i, s) in rollout.steps.iter().enumerate() {
            let t = 2.0 * i as f64;
            turns.push(Turn::new(Speaker::User, self.vocab[s.user_token].clone(), t, t + 1.0));
            turns.push(Turn::new(Speaker::Agent, self.vocab[s.action].clone(), t + 1.0, t + 2.0));
        }
        Trajectory::new("rollout", turns, 0.0, Speaker::User)
    }
}

impl StepReward for RewardModelScorer<'_> {
    fn step_rewards(&self, rollout: &Rollout) -> Result<Vec<f64>> {
        let traj = self.dialogue(rollout)?;
        (0..rollout.steps.len()).map(|i| self.model.predict(&traj, 2 * i + 1)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Mean learned reward per action over the batch.
    pub mean_reward: f64,
    /// Mean exact KL to the reference over the batch's contexts, after the update.
    pub kl: f64,
    pub clip_fraction: f64,
}

fn mean_learned_reward(rewards: &[Vec<f64>]) -> f64 {
    let mut m = math::RunningMean::default();
    rewards.iter().flatten().for_each(|&r| m.push(r));
    m.mean().unwrap_or(0.0)
}

/// Clipped-surrogate update on one batch of rollouts sampled from `policy`.
///
/// The per-step objective is `r - kl_coefficient * (log pi - log pi_ref)`;
/// advantages are undiscounted reward-to-go minus the batch mean, divided by
/// the batch standard deviation when `use_score_norm` is set.
pub fn ppo_step(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    reward_fn: &impl StepReward,
    batch: &[Rollout],
    cfg: &RlConfig,
) -> Result<(ToyPolicy, StepStats)> {
    cfg.validate()?;
    let learned: Vec<Vec<f64>> = batch.iter().map(|r| reward_fn.step_rewards(r)).collect::<Result<_>>()?;
    let mut advantages: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
    for (r, rewards) in batch.iter().zip(&learned) {
        if let Some(i) = rewards.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteReward(i));
        }
        if rewards.len() != r.steps.len() {
            return Err(Error::validation("reward_fn", "one reward per step required"));
        }
        let shaped: Vec<f64> = r
            .steps
            .iter()
            .zip(rewards)
            .map(|(s, &x)| x - cfg.kl_coefficient * (s.log_prob - reference.log_prob(s.context, s.action)))
            .collect();
        let mut to_go = vec![0.0; shaped.len()];
        let mut acc = 0.0;
        for i in (0..shaped.len()).rev() {
            acc += shaped[i];
            to_go[i] = acc;
        }
        advantages.push(to_go);
    }
    let flat: Vec<f64> = advantages.iter().flatten().copied().collect();
    if let Some(i) = flat.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteReward(i));
    }
    let n = flat.len().max(1) as f64;
    let mean = ordered_sum(flat.iter().copied()) / n;
    let scale = if cfg.use_score_norm {
        let var = math::population_variance(&flat).unwrap_or(0.0);
        1.0 / (libm::sqrt(var) + 1e-8)
    } else {
        1.0
    };
    for a in advantages.iter_mut().flatten() {
        *a = (*a - mean) * scale;
    }

    let mut current = policy.clone();
    let v = policy.vocab_size;
    let mut clipped = 0usize;
    for _ in 0..cfg.ppo_epochs {
        clipped = 0;
        let mut grad = vec![0.0; current.logits.len()];
        for (r, adv) in batch.iter().zip(&advantages) {
            for (s, &a) in r.steps.iter().zip(adv) {
                let logp = current.log_probs(s.context);
                let ratio = libm::exp(logp[s.action] - s.log_prob);
                let is_clipped = (a > 0.0 && ratio > 1.0 + cfg.clip_range) || (a < 0.0 && ratio < 1.0 - cfg.clip_range);
                if is_clipped {
                    clipped += 1;
                    continue;
                }
                let row = &mut grad[s.context * v..(s.context + 1) * v];
                for (j, g) in row.iter_mut().enumerate() {
                    let indicator = if j == s.action { 1.0 } else { 0.0 };
                    *g += ratio * a * (indicator - libm::exp(logp[j])) / n;
                }
            }
        }
        for (l, g) in current.logits.iter_mut().zip(&grad) {
            *l += cfg.learning_rate * g;
        }
    }
    let stats = StepStats {
        mean_reward: mean_learned_reward(&learned),
        kl: policy_kl(&current, reference, batch),
        clip_fraction: clipped as f64 / n,
    };
    Ok((current, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub step: usize,
    pub mean_reward: f64,
    pub kl: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub config: RlConfig,
    pub curve: Vec<CurveRow>,
    pub initial_mean_reward: f64,
    pub final_mean_reward: f64,
    pub final_kl: f64,
    pub policy: ToyPolicy,
}

fn sample_batch(policy: &ToyPolicy, cfg: &RlConfig, step: usize) -> Vec<Rollout> {
    (0..cfg.batch_size)
        .map(|b| {
            let mut label = [0u8; 16];
            label[..8].copy_from_slice(&(step as u64).to_le_bytes());
            label[8..].copy_from_slice(&(b as u64).to_le_bytes());
            rollout(policy, math::derive_seed(cfg.seed, &label), cfg.episode_length)
        })
        .collect()
}

/// Runs `cfg.steps` rollout/update rounds from the uniform policy, which also
/// serves as the reference. Row `s` of the curve evaluates the policy after
/// `s` updates on a fresh batch (the one the next update trains on) and
/// carries the clip fraction of update `s`; row 0 is the initial policy.
pub fn run_alignment(reward_fn: &impl StepReward, cfg: &RlConfig) -> Result<AlignmentReport> {
    cfg.validate()?;
    let reference = ToyPolicy::uniform(cfg.vocab_size, cfg.context_order);
    let mut policy = reference.clone();
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    let mut clip_fraction = 0.0;
    for step in 0..=cfg.steps {
        let batch = sample_batch(&policy, cfg, step);
        let learned: Vec<Vec<f64>> = batch.iter().map(|r| reward_fn.step_rewards(r)).collect::<Result<_>>()?;
        curve.push(CurveRow {
            step,
            mean_reward: mean_learned_reward(&learned),
            kl: policy_kl(&policy, &reference, &batch),
            clip_fraction,
        });
        if step == cfg.steps {
            break;
        }
        let (next, stats) = ppo_step(&policy, &reference, reward_fn, &batch, cfg)?;
        policy = next;
        clip_fraction = stats.clip_fraction;
    }
    let first = curve[0];
    let last = *curve.last().expect("row 0 always present");
    Ok(AlignmentReport {
        config: cfg.clone(),
        initial_mean_reward: first.mean_reward,
        final_mean_reward: last.mean_reward,
        final_kl: last.kl,
        curve,
        policy,
    })
}
