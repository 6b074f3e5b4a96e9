//! Classical decompositions of the session score.
//!
//! * uniform: `R / T` on every agent turn.
//! * IRCR: the min-max normalized session score on every agent turn.
//! * RUDDER-style differencing of a learned prefix-return predictor.
//! * RRD: regression of subsampled, rescaled turn-reward sums on `R`.
//! * Mean / Mode: a corpus constant spread evenly over agent turns.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Speaker, Trajectory};
use crate::decompose::{Method, Provenance, RewardAssignment};
use crate::error::{Error, Result};
use crate::math::{self, exact_even_split, ordered_sum, Adam, Rng};
use crate::reward_model::{self, Featurizer, Optimizer, RewardModel, SparseVec};

fn provenance(method: Method, seed: u64) -> Provenance {
    Provenance {
        model_id: method.as_str().to_ascii_lowercase(),
        sample_seed: seed,
        projected: false,
    }
}

fn spread(traj: &Trajectory, method: Method, total: f64, seed: u64) -> Result<RewardAssignment> {
    let agent = traj.agent_turn_indices();
    if agent.is_empty() {
        return Err(Error::NoAgentTurns(traj.id.clone()));
    }
    let rewards = agent.into_iter().zip(exact_even_split(total, traj.agent_turn_count())).collect();
    RewardAssignment::new(traj, method, rewards, provenance(method, seed))
}

/// `R_GE / T` on every agent turn; the sum is exactly `R_GE`.
pub fn uniform_decompose(traj: &Trajectory) -> Result<RewardAssignment> {
    spread(traj, Method::Uniform, traj.global_reward, 0)
}

/// Min and max session score of a reference split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRange {
    pub min: f64,
    pub max: f64,
}

impl RewardRange {
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let mut it = corpus.trajectories.iter().map(|t| t.global_reward);
        let first = it.next().ok_or(Error::EmptySplit)?;
        let (min, max) = it.fold((first, first), |(lo, hi), r| (lo.min(r), hi.max(r)));
        Ok(Self { min, max })
    }
}

/// The normalized session score on every agent turn. Not sum-preserving.
pub fn ircr_decompose(traj: &Trajectory, range: RewardRange) -> Result<RewardAssignment> {
    if range.max <= range.min {
        return Err(Error::DegenerateCorpus(range.min));
    }
    let value = (traj.global_reward - range.min) / (range.max - range.min);
    let rewards = traj.agent_turn_indices().into_iter().map(|i| (i, value)).collect();
    RewardAssignment::new(traj, Method::Ircr, rewards, provenance(Method::Ircr, 0))
}

/// Anything that predicts the return of every turn prefix.
pub trait PrefixReturn {
    /// Predicted return after each turn: element `j` is `g(turns[..=j])`.
    fn prefix_returns(&self, traj: &Trajectory) -> Vec<f64>;
}

impl<F: Fn(&Trajectory) -> Vec<f64>> PrefixReturn for F {
    fn prefix_returns(&self, traj: &Trajectory) -> Vec<f64> {
        self(traj)
    }
}

/// Rewards as differences of consecutive prefix returns at agent turns, with
/// `g(empty) = 0`. The last agent turn's difference runs to the end of the
/// dialogue, so the rewards sum to `g(full trajectory)`.
pub fn rudder_decompose(traj: &Trajectory, g: &impl PrefixReturn) -> Result<RewardAssignment> {
    let agent = traj.agent_turn_indices();
    let Some(&last_agent) = agent.last() else {
        return Err(Error::NoAgentTurns(traj.id.clone()));
    };
    let returns = g.prefix_returns(traj);
    let mut prev = 0.0;
    let mut rewards = BTreeMap::new();
    for &i in &agent {
        let upto = if i == last_agent { returns.len() - 1 } else { i };
        let cur = returns[upto];
        rewards.insert(i, cur - prev);
        prev = cur;
    }
    RewardAssignment::new(traj, Method::Rudder, rewards, provenance(Method::Rudder, 0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnPredictorConfig {
    pub featurizer: Featurizer,
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_trajectories: usize,
    pub seed: u64,
}

impl Default for ReturnPredictorConfig {
    fn default() -> Self {
        Self {
            featurizer: Featurizer {
                hash_dim: 256,
                ..Featurizer::default()
            },
            hidden: 32,
            learning_rate: 0.01,
            epochs: 60,
            batch_trajectories: 8,
            seed: 0,
        }
    }
}

/// Recurrent return predictor.
///
/// `h_j = tanh(W x_j + U h_{j-1} + b)` over per-turn inputs `x_j` (hashed
/// turn text plus a speaker indicator), and the prefix return is the running
/// sum `scale * sum_{i<=j} v . h_i`. The readout starts at zero, so an
/// untrained predictor returns 0 for every prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnPredictor {
    pub config: ReturnPredictorConfig,
    pub target_scale: f64,
    /// `[W; H*I] ++ [U; H*H] ++ [b; H] ++ [v; H]` with `I = hash_dim + 2`.
    pub params: Vec<f64>,
    pub loss_curve: Vec<f64>,
}

struct Layout {
    hidden: usize,
    input: usize,
}

impl Layout {
    fn w(&self) -> usize {
        0
    }
    fn u(&self) -> usize {
        self.hidden * self.input
    }
    fn b(&self) -> usize {
        self.u() + self.hidden * self.hidden
    }
    fn v(&self) -> usize {
        self.b() + self.hidden
    }
    fn len(&self) -> usize {
        self.v() + self.hidden
    }
}

impl ReturnPredictor {
    pub fn new(config: ReturnPredictorConfig, target_scale: f64) -> Self {
        let layout = Layout {
            hidden: config.hidden,
            input: config.featurizer.hash_dim + 2,
        };
        let mut rng = math::rng(config.seed);
        let mut params = vec![0.0; layout.len()];
        let u_scale = 0.5 / libm::sqrt(config.hidden.max(1) as f64);
        for (i, p) in params[..layout.b()].iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = if i < layout.u() { 0.5 * z } else { u_scale * z };
        }
        Self {
            config,
            target_scale,
            params,
            loss_curve: Vec::new(),
        }
    }

    fn layout(&self) -> Layout {
        Layout {
            hidden: self.config.hidden,
            input: self.config.featurizer.hash_dim + 2,
        }
    }

    fn inputs(&self, traj: &Trajectory) -> Vec<SparseVec> {
        let d = self.config.featurizer.hash_dim as u32;
        traj.turns
            .iter()
            .map(|turn| {
                let mut x = self.config.featurizer.turn_features(turn);
                x.push((if turn.speaker == Speaker::Agent { d } else { d + 1 }, 1.0));
                x
            })
            .collect()
    }

    /// Hidden states for each turn.
    fn states(&self, xs: &[SparseVec]) -> Vec<Vec<f64>> {
        let l = self.layout();
        let h = l.hidden;
        let p = &self.params;
        let mut states: Vec<Vec<f64>> = Vec::with_capacity(xs.len());
        for x in xs {
            let mut z: Vec<f64> = p[l.b()..l.b() + h].to_vec();
            for (k, zk) in z.iter_mut().enumerate() {
                let row = &p[l.w() + k * l.input..l.w() + (k + 1) * l.input];
                *zk += x.iter().map(|&(i, v)| row[i as usize] * v).sum::<f64>();
                if let Some(prev) = states.last() {
                    let urow = &p[l.u() + k * h..l.u() + (k + 1) * h];
                    *zk += urow.iter().zip(prev).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            states.push(z.into_iter().map(libm::tanh).collect());
        }
        states
    }

    fn readout(&self, h: &[f64]) -> f64 {
        let l = self.layout();
        self.params[l.v()..l.len()].iter().zip(h).map(|(a, b)| a * b).sum()
    }

    /// Loss `(R/scale - y)^2` and its gradient for one trajectory, added into
    /// `grad` with weight `weight`.
    fn backprop(&self, xs: &[SparseVec], target: f64, weight: f64, grad: &mut [f64]) -> f64 {
        let l = self.layout();
        let hdim = l.hidden;
        let states = self.states(xs);
        let y: f64 = states.iter().map(|h| self.readout(h)).sum();
        let err = y - target;
        let dy = 2.0 * err * weight;
        let v = &self.params[l.v()..l.len()];
        let mut dz_next = vec![0.0; hdim];
        for j in (0..xs.len()).rev() {
            let h = &states[j];
            let mut dh: Vec<f64> = v.iter().map(|vk| dy * vk).collect();
            if j + 1 < xs.len() {
                for (k, dz) in dz_next.iter().enumerate() {
                    if *dz == 0.0 {
                        continue;
                    }
                    let urow = &self.params[l.u() + k * hdim..l.u() + (k + 1) * hdim];
                    for (m, dhm) in dh.iter_mut().enumerate() {
                        *dhm += urow[m] * dz;
                    }
                }
            }
            for k in 0..hdim {
                grad[l.v() + k] += dy * h[k];
                let dz = dh[k] * (1.0 - h[k] * h[k]);
                dz_next[k] = dz;
                grad[l.b() + k] += dz;
                for &(i, xv) in &xs[j] {
                    grad[l.w() + k * l.input + i as usize] += dz * xv;
                }
                if j > 0 {
                    let prev = &states[j - 1];
                    for m in 0..hdim {
                        grad[l.u() + k * hdim + m] += dz * prev[m];
                    }
                }
            }
        }
        err * err
    }

    /// Predicted return of the whole trajectory.
    pub fn predict(&self, traj: &Trajectory) -> f64 {
        self.prefix_returns(traj).last().copied().unwrap_or(0.0)
    }
}

impl PrefixReturn for ReturnPredictor {
    fn prefix_returns(&self, traj: &Trajectory) -> Vec<f64> {
        let states = self.states(&self.inputs(traj));
        let mut acc = 0.0;
        states
            .iter()
            .map(|h| {
                acc += self.readout(h);
                self.target_scale * acc
            })
            .collect()
    }
}

fn mean_sq_error(g: &ReturnPredictor, corpus: &Corpus) -> f64 {
    let n = corpus.len() as f64;
    corpus
        .trajectories
        .iter()
        .map(|t| {
            let e = t.global_reward - g.predict(t);
            e * e
        })
        .sum::<f64>()
        / n
}

/// Fits the return predictor to session scores with Adam over mini-batches
/// of whole trajectories. `loss_curve[e]` is the training MSE after `e`
/// epochs.
pub fn train_return_predictor(corpus: &Corpus, cfg: &ReturnPredictorConfig) -> Result<ReturnPredictor> {
    if corpus.is_empty() {
        return Err(Error::EmptySplit);
    }
    cfg.featurizer.validate()?;
    let mean_abs = corpus.trajectories.iter().map(|t| libm::fabs(t.global_reward)).sum::<f64>() / corpus.len() as f64;
    let mut g = ReturnPredictor::new(cfg.clone(), mean_abs.max(1.0));
    let data: Vec<(Vec<SparseVec>, f64)> = corpus
        .trajectories
        .iter()
        .map(|t| (g.inputs(t), t.global_reward / g.target_scale))
        .collect();
    let mut rng = math::rng(math::derive_seed(cfg.seed, b"return-predictor"));
    let mut adam = Adam::new(g.params.len(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = vec![0.0; g.params.len()];
    let mut curve = vec![mean_sq_error(&g, corpus)];
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(cfg.batch_trajectories.max(1)) {
            grad.iter_mut().for_each(|x| *x = 0.0);
            let w = 1.0 / chunk.len() as f64;
            for &i in chunk {
                g.backprop(&data[i].0, data[i].1, w, &mut grad);
            }
            adam.step(&mut g.params, &grad);
        }
        curve.push(mean_sq_error(&g, corpus));
    }
    g.loss_curve = curve;
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrdConfig {
    /// Subsample size; clamped to each trajectory's agent-turn count.
    pub k: usize,
    pub batch_trajectories: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for RrdConfig {
    fn default() -> Self {
        Self {
            k: 32,
            batch_trajectories: 16,
            iterations: 2000,
            learning_rate: 0.01,
            seed: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

/// One sampled trajectory and the positions (into its agent-turn list) of
/// the subsampled turns.
pub type RrdDraw = (usize, Vec<usize>);

/// Seeded stream of RRD mini-batches: trajectories drawn uniformly with
/// replacement, agent turns drawn uniformly without replacement.
#[derive(Debug, Clone)]
pub struct RrdSampler {
    rng: Rng,
    agent_counts: Vec<usize>,
    k: usize,
    batch: usize,
}

impl RrdSampler {
    pub fn new(agent_counts: Vec<usize>, cfg: &RrdConfig) -> Result<Self> {
        if cfg.k < 1 {
            return Err(Error::BadK);
        }
        if agent_counts.is_empty() {
            return Err(Error::EmptySplit);
        }
        Ok(Self {
            rng: math::rng(cfg.seed),
            agent_counts,
            k: cfg.k,
            batch: cfg.batch_trajectories.max(1),
        })
    }

    pub fn next_batch(&mut self) -> Vec<RrdDraw> {
        (0..self.batch)
            .map(|_| {
                let t = self.rng.random_range(0..self.agent_counts.len());
                let n = self.agent_counts[t];
                let mut picked = index::sample(&mut self.rng, n, self.k.min(n)).into_vec();
                picked.sort_unstable();
                (t, picked)
            })
            .collect()
    }
}

struct AgentFeatures {
    reward: f64,
    turns: Vec<SparseVec>,
}

fn agent_features(model: &RewardModel, corpus: &Corpus) -> Result<Vec<AgentFeatures>> {
    corpus
        .trajectories
        .iter()
        .map(|t| {
            let turns = t
                .agent_turn_indices()
                .into_iter()
                .map(|i| model.featurizer.featurize_sparse(t, i))
                .collect::<Result<Vec<_>>>()?;
            Ok(AgentFeatures {
                reward: t.global_reward,
                turns,
            })
        })
        .collect()
}

fn rrd_term(model: &RewardModel, data: &AgentFeatures, picked: &[usize]) -> (f64, f64) {
    let scale = data.turns.len() as f64 / picked.len() as f64;
    let sum = ordered_sum(picked.iter().map(|&p| model.forward(&data.turns[p])));
    (data.reward - scale * sum, scale)
}

/// One-sample estimate of the RRD surrogate: a single size-`k` subset per
/// trajectory, averaged over the corpus. With `k` at least every agent-turn
/// count this is the global loss.
pub fn rrd_surrogate_loss(model: &RewardModel, corpus: &Corpus, k: usize, seed: u64) -> Result<f64> {
    if k < 1 {
        return Err(Error::BadK);
    }
    if corpus.is_empty() {
        return Err(Error::EmptySplit);
    }
    let data = agent_features(model, corpus)?;
    let mut rng = math::rng(seed);
    let total = ordered_sum(data.iter().map(|d| {
        let n = d.turns.len();
        let mut picked = index::sample(&mut rng, n, k.min(n)).into_vec();
        picked.sort_unstable();
        let (e, _) = rrd_term(model, d, &picked);
        e * e
    }));
    Ok(total / data.len() as f64)
}

#[derive(Debug, Clone)]
pub struct RrdTrained {
    pub model: RewardModel,
    /// Mini-batch surrogate loss per iteration.
    pub loss_curve: Vec<f64>,
}

/// Randomized return decomposition: stochastic gradient descent on
/// `E[(R - (T/K) * sum_{t in S} r(s_t, a_t))^2]`.
pub fn train_rrd(corpus: &Corpus, model: &RewardModel, cfg: &RrdConfig) -> Result<RrdTrained> {
    if cfg.k < 1 {
        return Err(Error::BadK);
    }
    if corpus.is_empty() {
        return Err(Error::EmptySplit);
    }
    model.validate()?;
    let mut model = model.clone();
    let data = agent_features(&model, corpus)?;
    let mut sampler = RrdSampler::new(data.iter().map(|d| d.turns.len()).collect(), cfg)?;
    let mut opt = reward_model::stepper(cfg.optimizer, model.param_count(), cfg.learning_rate);
    let mut grad = vec![0.0; model.param_count()];
    let mut curve = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let batch = sampler.next_batch();
        grad.iter_mut().for_each(|g| *g = 0.0);
        let w = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for (t, picked) in &batch {
            let d = &data[*t];
            let (e, scale) = rrd_term(&model, d, picked);
            loss += w * e * e;
            for &p in picked {
                model.accumulate_output_grad(&d.turns[p], -2.0 * e * scale * w, &mut grad);
            }
        }
        curve.push(loss);
        opt.step(&mut model.params, &grad);
    }
    Ok(RrdTrained { model, loss_curve: curve })
}

/// Per-turn rewards read off an RRD-trained model.
pub fn rrd_decompose(traj: &Trajectory, model: &RewardModel) -> Result<RewardAssignment> {
    let rewards = traj
        .agent_turn_indices()
        .into_iter()
        .map(|i| Ok((i, model.predict(traj, i)?)))
        .collect::<Result<_>>()?;
    RewardAssignment::new(traj, Method::Rrd, rewards, provenance(Method::Rrd, 0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConstantKind {
    Mean,
    Mode,
}

/// A corpus-level constant session score spread evenly over agent turns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantBaseline {
    pub kind: ConstantKind,
    pub value: f64,
}

/// Mean of the session scores, or their mode after rounding to integers
/// (ties go to the smaller value).
pub fn constant_baseline(corpus: &Corpus, kind: ConstantKind) -> Result<ConstantBaseline> {
    if corpus.is_empty() {
        return Err(Error::EmptySplit);
    }
    let rewards = corpus.trajectories.iter().map(|t| t.global_reward);
    let value = match kind {
        ConstantKind::Mean => ordered_sum(rewards) / corpus.len() as f64,
        ConstantKind::Mode => {
            let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
            for r in rewards {
                *counts.entry(libm::round(r) as i64).or_default() += 1;
            }
            let best = counts.values().copied().max().unwrap_or(0);
            counts.into_iter().find(|&(_, c)| c == best).map(|(v, _)| v as f64).unwrap_or(0.0)
        }
    };
    Ok(ConstantBaseline { kind, value })
}

impl ConstantBaseline {
    pub fn method(&self) -> Method {
        match self.kind {
            ConstantKind::Mean => Method::Mean,
            ConstantKind::Mode => Method::Mode,
        }
    }

    /// Per-turn rewards summing exactly to the constant.
    pub fn assign(&self, traj: &Trajectory) -> Result<RewardAssignment> {
        spread(traj, self.method(), self.value, 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Split, Turn};

    fn traj(id: &str, n_agent: usize, reward: f64) -> Trajectory {
        let mut turns = Vec::new();
        for i in 0..n_agent {
            turns.push(Turn::new(Speaker::Agent, "agent words", 2.0 * i as f64, 2.0 * i as f64 + 1.0));
            turns.push(Turn::new(Speaker::User, "user words", 2.0 * i as f64 + 1.0, 2.0 * i as f64 + 2.0));
        }
        Trajectory::new(id, turns, reward, Speaker::User).unwrap()
    }

    fn corpus(rewards: &[f64]) -> Corpus {
        let ts = rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| traj(&alloc::format!("t{i}"), 3, r))
            .collect();
        Corpus::new(Split::RewardTrain, ts).unwrap()
    }

    #[test]
    fn uniform_examples() {
        let a = uniform_decompose(&traj("a", 3, 6.0)).unwrap();
        assert_eq!(a.rewards.values().copied().collect::<Vec<_>>(), vec![2.0, 2.0, 2.0]);
        assert_eq!(a.residual, 0.0);
        let z = uniform_decompose(&traj("z", 4, 0.0)).unwrap();
        assert!(z.rewards.values().all(|&r| r == 0.0));
        let one = uniform_decompose(&traj("o", 1, 75.0)).unwrap();
        assert_eq!(one.rewards, BTreeMap::from([(0, 75.0)]));
    }

    #[test]
    fn ircr_examples() {
        let range = RewardRange { min: 0.0, max: 100.0 };
        let a = ircr_decompose(&traj("a", 2, 75.0), range).unwrap();
        assert!(a.rewards.values().all(|&r| r == 0.75));
        assert_eq!(a.residual, 75.0 - 1.5);
        let floor = ircr_decompose(&traj("b", 2, 0.0), range).unwrap();
        assert!(floor.rewards.values().all(|&r| r == 0.0));
        let same = RewardRange::from_corpus(&corpus(&[50.0, 50.0])).unwrap();
        assert_eq!(ircr_decompose(&traj("c", 2, 50.0), same).unwrap_err().code(), "DEGENERATE_CORPUS");
    }

    #[test]
    fn rudder_differences() {
        let t = traj("r", 3, 10.0);
        // prefix returns after turns 0..6; agent turns are 0, 2, 4
        let g = |_: &Trajectory| vec![2.0, 2.5, 5.0, 5.5, 6.0, 6.0];
        let a = rudder_decompose(&t, &g).unwrap();
        assert_eq!(a.rewards.values().copied().collect::<Vec<_>>(), vec![2.0, 3.0, 1.0]);
        let constant = |t: &Trajectory| vec![4.0; t.turns.len()];
        let c = rudder_decompose(&t, &constant).unwrap();
        assert_eq!(c.rewards.values().copied().collect::<Vec<_>>(), vec![4.0, 0.0, 0.0]);
    }

    #[test]
    fn rudder_trailing_user_turns_go_to_last_agent_turn() {
        let t = traj("r", 2, 10.0);
        let g = |_: &Trajectory| vec![1.0, 2.0, 3.0, 7.0];
        let a = rudder_decompose(&t, &g).unwrap();
        assert_eq!(a.rewards.values().copied().collect::<Vec<_>>(), vec![1.0, 6.0]);
        assert_eq!(a.total(), 7.0);
    }

    #[test]
    fn untrained_predictor_returns_zero() {
        let c = corpus(&[10.0, 20.0]);
        let cfg = ReturnPredictorConfig {
            epochs: 0,
            ..ReturnPredictorConfig::default()
        };
        let g = train_return_predictor(&c, &cfg).unwrap();
        for t in &c.trajectories {
            assert!(g.prefix_returns(t).iter().all(|&x| x == 0.0));
        }
        assert_eq!(g.loss_curve.len(), 1);
    }

    #[test]
    fn empty_split_errors() {
        let empty = Corpus::new(Split::RewardTrain, Vec::new()).unwrap();
        assert_eq!(train_return_predictor(&empty, &ReturnPredictorConfig::default()).unwrap_err().code(), "EMPTY_SPLIT");
        assert_eq!(constant_baseline(&empty, ConstantKind::Mean).unwrap_err().code(), "EMPTY_SPLIT");
        let m = RewardModel::affine(Featurizer::default());
        assert_eq!(train_rrd(&empty, &m, &RrdConfig::default()).unwrap_err().code(), "EMPTY_SPLIT");
        let bad_k = RrdConfig {
            k: 0,
            ..RrdConfig::default()
        };
        assert_eq!(train_rrd(&corpus(&[1.0]), &m, &bad_k).unwrap_err().code(), "BAD_K");
    }

    #[test]
    fn constant_values() {
        assert_eq!(constant_baseline(&corpus(&[70.0, 80.0, 90.0]), ConstantKind::Mean).unwrap().value, 80.0);
        assert_eq!(constant_baseline(&corpus(&[70.0, 70.0, 90.0]), ConstantKind::Mode).unwrap().value, 70.0);
        // rounding buckets 69.6 and 70.4 together; tie 70 vs 90 goes low
        assert_eq!(
            constant_baseline(&corpus(&[69.6, 70.4, 90.0, 89.9]), ConstantKind::Mode).unwrap().value,
            70.0
        );
        let b = constant_baseline(&corpus(&[70.0, 80.0, 90.0]), ConstantKind::Mean).unwrap();
        let a = b.assign(&traj("x", 3, 10.0)).unwrap();
        assert_eq!(a.total(), 80.0);
        assert_eq!(a.method, Method::Mean);
    }

    #[test]
    fn rrd_sampler_is_seeded() {
        let cfg = RrdConfig {
            k: 1,
            batch_trajectories: 1,
            seed: 11,
            ..RrdConfig::default()
        };
        let draws = |cfg: &RrdConfig| {
            let mut s = RrdSampler::new(vec![3], cfg).unwrap();
            (0..20).map(|_| s.next_batch()).collect::<Vec<_>>()
        };
        let a = draws(&cfg);
        assert_eq!(a, draws(&cfg));
        assert!(a.iter().all(|b| b[0].1.len() == 1 && b[0].1[0] < 3));
        // all three singletons show up over 20 draws
        let mut seen: Vec<usize> = a.iter().map(|b| b[0].1[0]).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen, vec![0, 1, 2]);
    }
}
