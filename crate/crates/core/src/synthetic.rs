//! Synthetic corpora with known per-turn rewards, and a mock oracle that
//! answers decomposition prompts from that ground truth.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Channel, Corpus, FeatureFrame, Speaker, Split, Trajectory, Turn, MAX_GLOBAL_REWARD};
use crate::decompose::{ChatOracle, ChatRequest, OracleError};
use crate::error::{Error, Result};
use crate::math::{self, ordered_sum, Rng};
use crate::reward_model::Featurizer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RewardRule {
    /// `base_reward + w . featurize(turn)` for a hidden Gaussian `w`.
    LinearInFeatures,
    /// A random `salient_fraction` of agent turns contain the marker word
    /// `vocab[0]` and earn `salient_reward`; the rest earn `base_reward`.
    PlantedSalientTurns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_trajectories: usize,
    pub turns_min: usize,
    pub turns_max: usize,
    pub vocab: Vec<String>,
    pub true_reward_rule: RewardRule,
    /// Listener happiness is raised by this much on high-reward agent turns.
    pub affect_gap: f64,
    /// Gaussian noise on the session score.
    pub noise_sigma: f64,
    pub seed: u64,
    pub salient_fraction: f64,
    pub salient_reward: f64,
    pub base_reward: f64,
    pub offset: f64,
    pub frames_per_turn: usize,
    pub featurizer: Featurizer,
    pub weight_scale: f64,
    pub id_prefix: String,
    pub split: Split,
}

/// Word list for synthetic text. The first entry is the salient marker.
pub const DEFAULT_VOCAB: [&str; 32] = [
    "wonderful", "river", "table", "morning", "garden", "window", "music", "paper", "yellow", "engine", "market",
    "pencil", "winter", "candle", "forest", "bottle", "planet", "ladder", "silver", "basket", "mirror", "tunnel",
    "harbor", "meadow", "rocket", "pillow", "lemon", "castle", "feather", "jacket", "valley", "anchor",
];

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_trajectories: 200,
            turns_min: 10,
            turns_max: 30,
            vocab: DEFAULT_VOCAB.iter().map(|w| w.to_string()).collect(),
            true_reward_rule: RewardRule::PlantedSalientTurns,
            affect_gap: 0.2,
            noise_sigma: 0.0,
            seed: 0,
            salient_fraction: 0.2,
            salient_reward: 2.0,
            base_reward: 1.0,
            offset: 0.0,
            frames_per_turn: 3,
            featurizer: Featurizer {
                hash_dim: 64,
                ..Featurizer::default()
            },
            weight_scale: 1.0,
            id_prefix: "syn".into(),
            split: Split::RewardTrain,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::BadSpec(m.into()));
        if self.n_trajectories == 0 {
            return bad("n_trajectories must be positive");
        }
        if self.turns_min == 0 || self.turns_min > self.turns_max {
            return bad("turns range must satisfy 1 <= min <= max");
        }
        if self.vocab.len() < 2 || self.vocab.iter().any(|w| crate::reward_model::tokenize(w).len() != 1) {
            return bad("vocab needs at least two single-token words");
        }
        if !(self.noise_sigma >= 0.0) || !(self.weight_scale >= 0.0) {
            return bad("noise_sigma and weight_scale must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.salient_fraction) {
            return bad("salient_fraction must lie in [0, 1]");
        }
        if !self.affect_gap.is_finite() || !self.offset.is_finite() {
            return bad("affect_gap and offset must be finite");
        }
        self.featurizer.validate().map_err(|e| Error::BadSpec(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTruth {
    pub rewards: BTreeMap<usize, f64>,
    pub offset: f64,
    /// `sum(rewards) + offset + noise`, before clamping to the survey scale.
    pub pre_clamp: f64,
    /// Agent turns that received affect planting.
    pub high_reward_turns: Vec<usize>,
}

impl TrajectoryTruth {
    pub fn total(&self) -> f64 {
        ordered_sum(self.rewards.values().copied())
    }

    pub fn is_clamped(&self) -> bool {
        !(0.0..=MAX_GLOBAL_REWARD).contains(&self.pre_clamp)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HiddenTruth {
    pub trajectories: BTreeMap<String, TrajectoryTruth>,
}

impl HiddenTruth {
    pub fn get(&self, id: &str) -> Option<&TrajectoryTruth> {
        self.trajectories.get(id)
    }

    pub fn is_unclamped(&self, id: &str) -> bool {
        self.get(id).is_some_and(|t| !t.is_clamped())
    }

    pub fn merge(&mut self, other: HiddenTruth) {
        self.trajectories.extend(other.trajectories);
    }
}

fn clamp01(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

fn words(rng: &mut Rng, vocab: &[String], n: usize) -> Vec<String> {
    (0..n).map(|_| vocab.choose(rng).expect("non-empty").clone()).collect()
}

fn emit_frames(
    rng: &mut Rng,
    spec: &SyntheticSpec,
    id: &str,
    turn: &Turn,
    elevated: bool,
    frames: &mut Vec<FeatureFrame>,
) {
    let noise = Normal::new(0.0, 0.08).expect("valid sigma");
    let n = spec.frames_per_turn;
    for j in 0..n {
        let t = turn.t_start + (j as f64 + 0.5) * (turn.t_end - turn.t_start) / n as f64;
        let mut push = |channel: Channel, value: f64| {
            frames.push(FeatureFrame {
                trajectory_id: id.into(),
                speaker: Speaker::User,
                timestamp: t,
                channel,
                value,
            })
        };
        let z = |rng: &mut Rng| -> f64 { StandardNormal.sample(rng) };
        push(Channel::F0, 180.0 + 30.0 * z(rng));
        push(Channel::Intensity, 60.0 + 5.0 * z(rng));
        push(Channel::Jitter, rng.random_range(0.005..0.02));
        push(Channel::LogEnergy, -5.0 + z(rng));
        push(Channel::Gaze, rng.random::<f64>());
        push(Channel::NodYes, f64::from(u8::from(rng.random_bool(0.3))));
        push(Channel::NodNo, f64::from(u8::from(rng.random_bool(0.1))));
        push(Channel::Smile, f64::from(u8::from(rng.random_bool(0.3))));
        let gap = if elevated { spec.affect_gap } else { 0.0 };
        for ch in Channel::EMOTIONS {
            let v = match ch {
                Channel::Happiness => 0.30 + gap + noise.sample(rng),
                Channel::Neutral => 0.35 + noise.sample(rng),
                _ => rng.random_range(0.0..0.12),
            };
            push(ch, clamp01(v));
        }
    }
    // the scored speaker's own expression, which summaries must ignore
    frames.push(FeatureFrame {
        trajectory_id: id.into(),
        speaker: Speaker::Agent,
        timestamp: turn.t_start,
        channel: Channel::Happiness,
        value: rng.random::<f64>(),
    });
}

/// Generates a seeded corpus and its hidden per-turn rewards. Turns
/// alternate agent/user starting with the agent, one second each; the user
/// is the listener.
pub fn generate(spec: &SyntheticSpec) -> Result<(Corpus, HiddenTruth)> {
    spec.validate()?;
    let mut rng = math::rng(spec.seed);
    let plain = &spec.vocab[1..];
    let marker = &spec.vocab[0];
    let weights: Vec<f64> = match spec.true_reward_rule {
        RewardRule::LinearInFeatures => (0..spec.featurizer.hash_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                spec.weight_scale * z
            })
            .collect(),
        RewardRule::PlantedSalientTurns => Vec::new(),
    };
    let score_noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::BadSpec(e.to_string()))?;
    let width = (spec.n_trajectories - 1).to_string().len();
    let mut trajectories = Vec::with_capacity(spec.n_trajectories);
    let mut frames = Vec::new();
    let mut truth = HiddenTruth::default();
    for n in 0..spec.n_trajectories {
        let id = format!("{}-{:0width$}", spec.id_prefix, n);
        let n_turns = rng.random_range(spec.turns_min..=spec.turns_max);
        let mut turns = Vec::with_capacity(n_turns);
        let mut salient = Vec::new();
        for i in 0..n_turns {
            let speaker = if i % 2 == 0 { Speaker::Agent } else { Speaker::User };
            let n_words = rng.random_range(3..=8);
            let mut text = words(&mut rng, plain, n_words);
            if speaker == Speaker::Agent
                && spec.true_reward_rule == RewardRule::PlantedSalientTurns
                && rng.random_bool(spec.salient_fraction)
            {
                let at = rng.random_range(0..=text.len());
                text.insert(at, marker.clone());
                salient.push(i);
            }
            turns.push(Turn::new(speaker, text.join(" "), i as f64, i as f64 + 1.0));
        }
        // placeholder score; replaced once the rewards are known
        let mut traj = Trajectory::new(id.clone(), turns, 0.0, Speaker::User)?;
        let rewards: BTreeMap<usize, f64> = match spec.true_reward_rule {
            RewardRule::PlantedSalientTurns => traj
                .agent_turn_indices()
                .into_iter()
                .map(|i| (i, if salient.contains(&i) { spec.salient_reward } else { spec.base_reward }))
                .collect(),
            RewardRule::LinearInFeatures => traj
                .agent_turn_indices()
                .into_iter()
                .map(|i| {
                    let x = spec.featurizer.featurize_sparse(&traj, i)?;
                    let dot: f64 = x.iter().map(|&(k, v)| weights[k as usize] * v).sum();
                    Ok((i, spec.base_reward + dot))
                })
                .collect::<Result<_>>()?,
        };
        let high: Vec<usize> = match spec.true_reward_rule {
            RewardRule::PlantedSalientTurns => salient,
            RewardRule::LinearInFeatures => rewards.iter().filter(|(_, &r)| r > spec.base_reward).map(|(&i, _)| i).collect(),
        };
        let sum = ordered_sum(rewards.values().copied());
        let noise = if spec.noise_sigma > 0.0 { score_noise.sample(&mut rng) } else { 0.0 };
        let pre_clamp = sum + spec.offset + noise;
        traj.global_reward = pre_clamp.clamp(0.0, MAX_GLOBAL_REWARD);
        for turn in traj.agent_turns() {
            emit_frames(&mut rng, spec, &id, turn, high.contains(&turn.index), &mut frames);
        }
        truth.trajectories.insert(
            id,
            TrajectoryTruth {
                rewards,
                offset: spec.offset,
                pre_clamp,
                high_reward_turns: high,
            },
        );
        trajectories.push(traj);
    }
    let mut corpus = Corpus::new(spec.split, trajectories)?;
    corpus.attach_frames(frames)?;
    Ok((corpus, truth))
}

/// Answers decomposition prompts with the hidden rewards plus optional
/// Gaussian noise, deterministic per (trajectory, seed, sample seed).
#[derive(Debug, Clone)]
pub struct MockOracle<'a> {
    truth: &'a HiddenTruth,
    noise_sigma: f64,
    seed: u64,
}

impl<'a> MockOracle<'a> {
    pub fn new(truth: &'a HiddenTruth, noise_sigma: f64, seed: u64) -> Self {
        Self {
            truth,
            noise_sigma,
            seed,
        }
    }

    /// The JSON answer for one trajectory.
    pub fn answer(&self, trajectory_id: &str, sample_seed: u64) -> Result<String, OracleError> {
        let t = self
            .truth
            .get(trajectory_id)
            .ok_or_else(|| OracleError::UnknownTrajectory(trajectory_id.into()))?;
        let mut label = Vec::from(trajectory_id.as_bytes());
        label.extend_from_slice(&sample_seed.to_le_bytes());
        let mut rng = math::rng(math::derive_seed(self.seed, &label));
        let noise = Normal::new(0.0, self.noise_sigma).map_err(|e| OracleError::Protocol(e.to_string()))?;
        let mut object = serde_json::Map::new();
        for (&i, &r) in &t.rewards {
            let value = if self.noise_sigma > 0.0 { r + noise.sample(&mut rng) } else { r };
            object.insert(i.to_string(), serde_json::Value::from(value));
        }
        serde_json::to_string(&object).map_err(|e| OracleError::Protocol(e.to_string()))
    }
}

impl ChatOracle for MockOracle<'_> {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, OracleError> {
        let id = request
            .conversation_id()
            .ok_or_else(|| OracleError::Protocol("prompt does not name a conversation".into()))?;
        self.answer(id, request.sample_seed)
    }
}

/// Convenience form of [`MockOracle::new`].
pub fn mock_oracle(truth: &HiddenTruth, noise_sigma: f64, seed: u64) -> MockOracle<'_> {
    MockOracle::new(truth, noise_sigma, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_trajectories: 12,
            seed,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let (a, ta) = generate(&small(5)).unwrap();
        let (b, tb) = generate(&small(5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = generate(&small(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_scores_are_exact_sums() {
        let (c, truth) = generate(&small(1)).unwrap();
        for t in &c.trajectories {
            let tt = truth.get(&t.id).unwrap();
            assert!(!tt.is_clamped());
            assert_eq!(t.global_reward, tt.total());
            assert_eq!(tt.rewards.keys().copied().collect::<Vec<_>>(), t.agent_turn_indices());
        }
    }

    #[test]
    fn salient_turns_carry_the_marker() {
        let (c, truth) = generate(&small(2)).unwrap();
        for t in &c.trajectories {
            let tt = truth.get(&t.id).unwrap();
            for &i in &tt.high_reward_turns {
                assert!(t.turns[i].text.split(' ').any(|w| w == "wonderful"));
                assert_eq!(tt.rewards[&i], 2.0);
            }
        }
    }

    #[test]
    fn bad_specs_are_rejected() {
        let cases = [
            SyntheticSpec {
                vocab: Vec::new(),
                ..small(0)
            },
            SyntheticSpec {
                noise_sigma: -1.0,
                ..small(0)
            },
            SyntheticSpec {
                turns_min: 5,
                turns_max: 4,
                ..small(0)
            },
        ];
        for spec in cases {
            assert_eq!(generate(&spec).unwrap_err().code(), "BAD_SPEC");
        }
    }

    #[test]
    fn mock_answers_truth_and_rejects_strangers() {
        let (_, truth) = generate(&small(3)).unwrap();
        let oracle = MockOracle::new(&truth, 0.0, 0);
        let (id, tt) = truth.trajectories.iter().next().unwrap();
        let parsed: BTreeMap<String, f64> = serde_json::from_str(&oracle.answer(id, 0).unwrap()).unwrap();
        for (k, v) in parsed {
            assert_eq!(tt.rewards[&k.parse::<usize>().unwrap()], v);
        }
        assert!(matches!(oracle.answer("nope", 0), Err(OracleError::UnknownTrajectory(_))));
        let noisy = MockOracle::new(&truth, 1.0, 0);
        assert_eq!(noisy.answer(id, 4).unwrap(), noisy.answer(id, 4).unwrap());
        assert_ne!(noisy.answer(id, 4).unwrap(), noisy.answer(id, 5).unwrap());
    }
}
