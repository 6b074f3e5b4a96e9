//! Text-only turn reward function `r(s_t, a_t)`.
//!
//! A turn is encoded by signed feature hashing of word n-grams over the
//! current utterance and up to `context_window` preceding turns. The
//! regressor is either affine or a one-hidden-layer tanh MLP; both keep
//! their parameters in one flat vector so optimizers and the finite
//! difference checker can treat them uniformly.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::hash::Hasher;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use siphasher::sip::SipHasher13;

use crate::corpus::{Corpus, Speaker, Trajectory, Turn};
use crate::decompose::RewardAssignment;
use crate::error::{Error, Result};
use crate::math::{self, Adam, Stepper};

/// Sparse feature vector: `(bucket, value)` pairs sorted by bucket.
pub type SparseVec = Vec<(u32, f64)>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    pub context_window: usize,
    pub hash_dim: usize,
    pub n_gram_max: usize,
    pub hash_seed: u64,
}

impl Default for Featurizer {
    fn default() -> Self {
        Self {
            context_window: 4,
            hash_dim: 1 << 14,
            n_gram_max: 2,
            hash_seed: 0,
        }
    }
}

/// Lowercases, drops punctuation, splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                tokens.push(core::mem::take(&mut current));
            }
        } else if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

impl Featurizer {
    pub fn validate(&self) -> Result<()> {
        if self.hash_dim == 0 || self.hash_dim > u32::MAX as usize {
            return Err(Error::validation("hash_dim", "must be in [1, 2^32)"));
        }
        if self.n_gram_max == 0 {
            return Err(Error::validation("n_gram_max", "must be at least 1"));
        }
        Ok(())
    }

    fn hash(&self, key1: u64, tag: &str, gram: &[String]) -> u64 {
        let mut h = SipHasher13::new_with_keys(self.hash_seed, key1);
        h.write(tag.as_bytes());
        h.write_u8(0xff);
        for (i, token) in gram.iter().enumerate() {
            if i > 0 {
                h.write_u8(b' ');
            }
            h.write(token.as_bytes());
        }
        h.finish()
    }

    fn add_text(&self, acc: &mut BTreeMap<u32, f64>, tag: &str, text: &str) {
        let tokens = tokenize(text);
        for n in 1..=self.n_gram_max.min(tokens.len()) {
            for gram in tokens.windows(n) {
                let bucket = (self.hash(0, tag, gram) % self.hash_dim as u64) as u32;
                let sign = if self.hash(1, tag, gram) & 1 == 0 { 1.0 } else { -1.0 };
                *acc.entry(bucket).or_insert(0.0) += sign;
            }
        }
    }

    fn finish(acc: BTreeMap<u32, f64>) -> SparseVec {
        let mut v: SparseVec = acc.into_iter().filter(|&(_, x)| x != 0.0).collect();
        let norm = libm::sqrt(v.iter().map(|(_, x)| x * x).sum::<f64>());
        if norm > 0.0 {
            for (_, x) in &mut v {
                *x /= norm;
            }
        }
        v
    }

    /// Sparse encoding of `(s_t, a_t)` for an agent turn. Context tokens are
    /// tagged with their speaker, the scored utterance with `act`.
    pub fn featurize_sparse(&self, traj: &Trajectory, turn_index: usize) -> Result<SparseVec> {
        let turn = traj.require_agent_turn(turn_index)?;
        let mut acc = BTreeMap::new();
        let start = turn_index.saturating_sub(self.context_window);
        for ctx in &traj.turns[start..turn_index] {
            let tag = match ctx.speaker {
                Speaker::Agent => "agent",
                Speaker::User => "user",
            };
            self.add_text(&mut acc, tag, &ctx.text);
        }
        self.add_text(&mut acc, "act", &turn.text);
        Ok(Self::finish(acc))
    }

    /// Dense form of [`Featurizer::featurize_sparse`].
    pub fn featurize(&self, traj: &Trajectory, turn_index: usize) -> Result<Vec<f64>> {
        let sparse = self.featurize_sparse(traj, turn_index)?;
        let mut dense = vec![0.0; self.hash_dim];
        for (i, x) in sparse {
            dense[i as usize] = x;
        }
        Ok(dense)
    }

    /// Context-free encoding of a single turn of either speaker.
    pub fn turn_features(&self, turn: &Turn) -> SparseVec {
        let mut acc = BTreeMap::new();
        let tag = match turn.speaker {
            Speaker::Agent => "agent",
            Speaker::User => "user",
        };
        self.add_text(&mut acc, tag, &turn.text);
        Self::finish(acc)
    }
}

/// Free-function form of [`Featurizer::featurize`].
pub fn featurize(traj: &Trajectory, turn_index: usize, f: &Featurizer) -> Result<Vec<f64>> {
    f.featurize(traj, turn_index)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RegressorKind {
    Affine,
    /// One hidden tanh layer.
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            optimizer: Optimizer::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub featurizer: Featurizer,
    pub kind: RegressorKind,
    /// Affine: `[w; D] ++ [b]`.
    /// MLP: `[W1; H*D] ++ [b1; H] ++ [w2; H] ++ [b2]`, `W1` row-major by unit.
    pub params: Vec<f64>,
    pub training_meta: Option<TrainingMeta>,
}

/// One `(features, target)` regression pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: SparseVec,
    pub target: f64,
}

impl RewardModel {
    /// Zero-initialized affine model.
    pub fn affine(featurizer: Featurizer) -> Self {
        let n = featurizer.hash_dim + 1;
        Self {
            featurizer,
            kind: RegressorKind::Affine,
            params: vec![0.0; n],
            training_meta: None,
        }
    }

    /// MLP with standard-normal first layer (inputs are unit-norm) and
    /// `1/sqrt(H)`-scaled output layer; biases start at zero.
    pub fn mlp(featurizer: Featurizer, hidden: usize, seed: u64) -> Self {
        let d = featurizer.hash_dim;
        let mut rng = math::rng(seed);
        let mut params = vec![0.0; hidden * d + 2 * hidden + 1];
        for p in &mut params[..hidden * d] {
            *p = StandardNormal.sample(&mut rng);
        }
        let scale = 1.0 / libm::sqrt(hidden.max(1) as f64);
        for p in &mut params[hidden * d + hidden..hidden * d + 2 * hidden] {
            let z: f64 = StandardNormal.sample(&mut rng);
            *p = z * scale;
        }
        Self {
            featurizer,
            kind: RegressorKind::Mlp { hidden },
            params,
            training_meta: None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn expected_len(&self) -> usize {
        let d = self.featurizer.hash_dim;
        match self.kind {
            RegressorKind::Affine => d + 1,
            RegressorKind::Mlp { hidden } => hidden * d + 2 * hidden + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.featurizer.validate()?;
        if self.params.len() != self.expected_len() {
            return Err(Error::validation(
                "params",
                alloc::format!("expected {} parameters, found {}", self.expected_len(), self.params.len()),
            ));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::validation("params", "non-finite parameter"));
        }
        Ok(())
    }

    /// Sets the output bias.
    pub fn set_bias(&mut self, b: f64) {
        let last = self.params.len() - 1;
        self.params[last] = b;
    }

    pub fn forward(&self, x: &[(u32, f64)]) -> f64 {
        let d = self.featurizer.hash_dim;
        match self.kind {
            RegressorKind::Affine => x.iter().map(|&(i, v)| self.params[i as usize] * v).sum::<f64>() + self.params[d],
            RegressorKind::Mlp { hidden } => {
                let (w1, rest) = self.params.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let mut y = b2[0];
                for h in 0..hidden {
                    let row = &w1[h * d..(h + 1) * d];
                    let z = x.iter().map(|&(i, v)| row[i as usize] * v).sum::<f64>() + b1[h];
                    y += w2[h] * libm::tanh(z);
                }
                y
            }
        }
    }

    /// Adds `scale * d(output)/d(params)` at input `x` into `grad`.
    pub fn accumulate_output_grad(&self, x: &[(u32, f64)], scale: f64, grad: &mut [f64]) {
        let d = self.featurizer.hash_dim;
        match self.kind {
            RegressorKind::Affine => {
                for &(i, v) in x {
                    grad[i as usize] += scale * v;
                }
                grad[d] += scale;
            }
            RegressorKind::Mlp { hidden } => {
                let w1_len = hidden * d;
                for h in 0..hidden {
                    let row = &self.params[h * d..(h + 1) * d];
                    let z = x.iter().map(|&(i, v)| row[i as usize] * v).sum::<f64>() + self.params[w1_len + h];
                    let a = libm::tanh(z);
                    let w2 = self.params[w1_len + hidden + h];
                    let dz = scale * w2 * (1.0 - a * a);
                    for &(i, v) in x {
                        grad[h * d + i as usize] += dz * v;
                    }
                    grad[w1_len + h] += dz;
                    grad[w1_len + hidden + h] += scale * a;
                }
                grad[w1_len + 2 * hidden] += scale;
            }
        }
    }

    /// `r(s_t, a_t)` for an agent turn. Reads only turn text.
    pub fn predict(&self, traj: &Trajectory, turn_index: usize) -> Result<f64> {
        let x = self.featurizer.featurize_sparse(traj, turn_index)?;
        Ok(self.forward(&x))
    }
}

/// Free-function form of [`RewardModel::predict`].
pub fn predict(m: &RewardModel, traj: &Trajectory, turn_index: usize) -> Result<f64> {
    m.predict(traj, turn_index)
}

/// Regression pairs from per-turn assignments. Agent turns an assignment
/// leaves unannotated get target 0.
pub fn training_pairs(featurizer: &Featurizer, corpus: &Corpus, assignments: &[RewardAssignment]) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for a in assignments {
        let traj = corpus
            .get(&a.trajectory_id)
            .ok_or_else(|| Error::UnknownTrajectory(a.trajectory_id.clone()))?;
        for idx in traj.agent_turn_indices() {
            out.push(Example {
                features: featurizer.featurize_sparse(traj, idx)?,
                target: a.rewards.get(&idx).copied().unwrap_or(0.0),
            });
        }
    }
    Ok(out)
}

/// Mean squared error over `examples`; 0 for an empty set.
pub fn mse(model: &RewardModel, examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let total: f64 = examples
        .iter()
        .map(|e| {
            let r = model.forward(&e.features) - e.target;
            r * r
        })
        .sum();
    total / examples.len() as f64
}

/// Analytic gradient of [`mse`] with respect to the flat parameters.
pub fn mse_gradient(model: &RewardModel, examples: &[Example]) -> Vec<f64> {
    let mut grad = vec![0.0; model.param_count()];
    if examples.is_empty() {
        return grad;
    }
    let n = examples.len() as f64;
    for e in examples {
        let r = model.forward(&e.features) - e.target;
        model.accumulate_output_grad(&e.features, 2.0 * r / n, &mut grad);
    }
    grad
}

pub(crate) fn stepper(optimizer: Optimizer, n: usize, lr: f64) -> Stepper {
    match optimizer {
        Optimizer::Sgd => Stepper::Sgd { lr },
        Optimizer::Adam => Stepper::Adam(Adam::new(n, lr)),
    }
}

/// Result of a training run: the trained model and the per-epoch training
/// MSE, starting with the initial model at epoch 0.
#[derive(Debug, Clone)]
pub struct Trained {
    pub model: RewardModel,
    pub loss_curve: Vec<f64>,
}

/// Mini-batch gradient descent on the MSE over `examples`.
pub fn train_on_examples(model: &RewardModel, examples: &[Example], cfg: &TrainConfig) -> Result<Trained> {
    if examples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    model.validate()?;
    let mut model = model.clone();
    let mut rng = math::rng(cfg.seed);
    let mut opt = stepper(cfg.optimizer, model.param_count(), cfg.learning_rate);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let batch_size = cfg.batch_size.max(1);
    let mut curve = vec![mse(&model, examples)];
    let mut grad = vec![0.0; model.param_count()];
    let mut batch: Vec<&Example> = Vec::with_capacity(batch_size);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &examples[i]));
            let n = batch.len() as f64;
            for e in &batch {
                let r = model.forward(&e.features) - e.target;
                model.accumulate_output_grad(&e.features, 2.0 * r / n, &mut grad);
            }
            opt.step(&mut model.params, &grad);
        }
        curve.push(mse(&model, examples));
    }
    model.training_meta = Some(TrainingMeta {
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch_size,
        seed: cfg.seed,
        optimizer: cfg.optimizer,
        final_train_loss: *curve.last().expect("initial loss"),
    });
    Ok(Trained { model, loss_curve: curve })
}

/// Distills per-turn assignments into the reward model by MSE regression.
pub fn train(model: &RewardModel, corpus: &Corpus, assignments: &[RewardAssignment], cfg: &TrainConfig) -> Result<Trained> {
    let examples = training_pairs(&model.featurizer, corpus, assignments)?;
    train_on_examples(model, &examples, cfg)
}

/// Maximum relative error between the analytic MSE gradient and central
/// finite differences, over up to `coords` parameters drawn at random from
/// those the batch can influence.
pub fn gradient_check(model: &RewardModel, batch: &[Example], epsilon: f64, coords: usize, seed: u64) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let analytic = mse_gradient(model, batch);
    let mut support = influenced_params(model, batch);
    let mut rng = math::rng(seed);
    if support.len() > coords {
        support = support.choose_multiple(&mut rng, coords).copied().collect();
        support.sort_unstable();
    }
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for i in support {
        let orig = probe.params[i];
        probe.params[i] = orig + epsilon;
        let up = mse(&probe, batch);
        probe.params[i] = orig - epsilon;
        let down = mse(&probe, batch);
        probe.params[i] = orig;
        let fd = (up - down) / (2.0 * epsilon);
        let ga = analytic[i];
        let denom = libm::fmax(libm::fmax(libm::fabs(ga), libm::fabs(fd)), 1e-8);
        worst = libm::fmax(worst, libm::fabs(ga - fd) / denom);
    }
    worst
}

fn influenced_params(model: &RewardModel, batch: &[Example]) -> Vec<usize> {
    let d = model.featurizer.hash_dim;
    let mut buckets: Vec<usize> = batch.iter().flat_map(|e| e.features.iter().map(|&(i, _)| i as usize)).collect();
    buckets.sort_unstable();
    buckets.dedup();
    match model.kind {
        RegressorKind::Affine => {
            buckets.push(d);
            buckets
        }
        RegressorKind::Mlp { hidden } => {
            let mut out = Vec::new();
            for h in 0..hidden {
                out.extend(buckets.iter().map(|&i| h * d + i));
            }
            out.extend(hidden * d..hidden * d + 2 * hidden + 1);
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Speaker;

    fn traj(texts: &[(Speaker, &str)]) -> Trajectory {
        let turns = texts
            .iter()
            .enumerate()
            .map(|(i, (s, t))| Turn::new(*s, *t, i as f64, i as f64 + 1.0))
            .collect();
        Trajectory::new("t", turns, 50.0, Speaker::User).unwrap()
    }

    #[test]
    fn tokenizer_strips_punctuation_and_case() {
        assert_eq!(tokenize("Hello, World!  It's fine."), vec!["hello", "world", "its", "fine"]);
        assert!(tokenize(" ,.; ").is_empty());
    }

    #[test]
    fn empty_text_gives_zero_vector() {
        let t = traj(&[(Speaker::Agent, "")]);
        let f = Featurizer {
            context_window: 0,
            hash_dim: 16,
            ..Featurizer::default()
        };
        assert!(f.featurize(&t, 0).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn features_are_unit_norm_and_pure() {
        let t = traj(&[(Speaker::User, "so how was it"), (Speaker::Agent, "it was great, thanks")]);
        let f = Featurizer::default();
        let a = f.featurize(&t, 1).unwrap();
        let b = f.featurize(&t, 1).unwrap();
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|x| x * x).sum();
        assert!((norm - 1.0).abs() < 1e-12);
        assert_eq!(f.featurize(&t, 0).unwrap_err().code(), "NOT_AGENT_TURN");
    }

    #[test]
    fn one_word_change_touches_few_coordinates() {
        // "a b c" vs "a x c" with bigrams: the changed n-grams are
        // {b, a b, b c} -> {x, a x, x c}; both vectors hold five unit counts,
        // so the norms agree and only those six buckets can differ.
        let f = Featurizer {
            context_window: 0,
            hash_dim: 1 << 20,
            n_gram_max: 2,
            hash_seed: 7,
        };
        let t1 = traj(&[(Speaker::Agent, "alpha bravo charlie")]);
        let t2 = traj(&[(Speaker::Agent, "alpha xray charlie")]);
        let a = f.featurize_sparse(&t1, 0).unwrap();
        let b = f.featurize_sparse(&t2, 0).unwrap();
        assert_eq!(a.len(), 5);
        assert_eq!(b.len(), 5);
        let mut diff = BTreeMap::new();
        for &(i, v) in &a {
            *diff.entry(i).or_insert(0.0) += v;
        }
        for &(i, v) in &b {
            *diff.entry(i).or_insert(0.0) -= v;
        }
        let changed = diff.values().filter(|v| **v != 0.0).count();
        assert_eq!(changed, 6);
        assert!(changed <= 2 * f.n_gram_max * 3);
    }

    #[test]
    fn context_window_limits_history() {
        let f = Featurizer {
            context_window: 1,
            hash_dim: 1 << 16,
            ..Featurizer::default()
        };
        let t1 = traj(&[(Speaker::User, "first"), (Speaker::User, "second"), (Speaker::Agent, "reply")]);
        let t2 = traj(&[(Speaker::User, "other"), (Speaker::User, "second"), (Speaker::Agent, "reply")]);
        assert_eq!(f.featurize_sparse(&t1, 2).unwrap(), f.featurize_sparse(&t2, 2).unwrap());
    }

    #[test]
    fn zero_and_bias_only_models() {
        let t = traj(&[(Speaker::Agent, "anything at all")]);
        let mut m = RewardModel::affine(Featurizer::default());
        assert_eq!(m.predict(&t, 0).unwrap(), 0.0);
        m.set_bias(2.5);
        assert_eq!(m.predict(&t, 0).unwrap(), 2.5);
        assert_eq!(m.predict(&t, 0).unwrap(), m.predict(&t, 0).unwrap());
    }

    #[test]
    fn constant_targets_fit_bias() {
        let f = Featurizer {
            hash_dim: 32,
            ..Featurizer::default()
        };
        let t = traj(&[(Speaker::Agent, "one two"), (Speaker::User, "x"), (Speaker::Agent, "three four five")]);
        let examples: Vec<Example> = [0, 2]
            .iter()
            .map(|&i| Example {
                features: f.featurize_sparse(&t, i).unwrap(),
                target: 3.0,
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 2000,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let trained = train_on_examples(&RewardModel::affine(f), &examples, &cfg).unwrap();
        assert!(trained.loss_curve.last().unwrap() < &1e-4);
        assert_eq!(trained.loss_curve.len(), 2001);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let f = Featurizer {
            hash_dim: 8,
            ..Featurizer::default()
        };
        let t = traj(&[(Speaker::Agent, "hello world")]);
        let ex = vec![Example {
            features: f.featurize_sparse(&t, 0).unwrap(),
            target: 1.0,
        }];
        for opt in [Optimizer::Sgd, Optimizer::Adam] {
            let m = RewardModel::mlp(f.clone(), 4, 3);
            let cfg = TrainConfig {
                learning_rate: 0.0,
                epochs: 5,
                optimizer: opt,
                ..TrainConfig::default()
            };
            assert_eq!(train_on_examples(&m, &ex, &cfg).unwrap().model.params, m.params);
        }
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let m = RewardModel::affine(Featurizer::default());
        assert_eq!(
            train_on_examples(&m, &[], &TrainConfig::default()).unwrap_err().code(),
            "EMPTY_TRAINING_SET"
        );
    }

    #[test]
    fn gradient_check_on_empty_batch_is_zero() {
        let m = RewardModel::mlp(Featurizer::default(), 4, 1);
        assert_eq!(gradient_check(&m, &[], 1e-5, 10, 0), 0.0);
    }
}
