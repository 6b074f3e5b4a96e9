//! Global loss, local difference and the per-method report.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::Trajectory;
use crate::decompose::{consistency, ConsistencySummary, RewardAssignment};
use crate::descriptors::{Affect, AffectIndex};
use crate::error::{Error, Result};
use crate::math::{ordered_sum, RunningMean};
use crate::reward_model::RewardModel;

/// Per-turn reward predictor evaluated on agent turns.
pub trait TurnPredictor {
    fn predict_turn(&self, traj: &Trajectory, turn_index: usize) -> f64;
}

impl<F: Fn(&Trajectory, usize) -> f64> TurnPredictor for F {
    fn predict_turn(&self, traj: &Trajectory, turn_index: usize) -> f64 {
        self(traj, turn_index)
    }
}

impl TurnPredictor for RewardModel {
    fn predict_turn(&self, traj: &Trajectory, turn_index: usize) -> f64 {
        self.predict(traj, turn_index).expect("metrics only query agent turns")
    }
}

/// Replays stored assignments as a predictor; unannotated turns (and
/// trajectories without an assignment) score 0.
#[derive(Debug, Clone, Default)]
pub struct AssignmentReplay {
    by_trajectory: BTreeMap<String, BTreeMap<usize, f64>>,
}

impl AssignmentReplay {
    /// Keeps the first assignment seen for each trajectory.
    pub fn new<'a>(assignments: impl IntoIterator<Item = &'a RewardAssignment>) -> Self {
        let mut by_trajectory = BTreeMap::new();
        for a in assignments {
            by_trajectory
                .entry(a.trajectory_id.clone())
                .or_insert_with(|| a.rewards.clone());
        }
        Self { by_trajectory }
    }
}

impl TurnPredictor for AssignmentReplay {
    fn predict_turn(&self, traj: &Trajectory, turn_index: usize) -> f64 {
        self.by_trajectory
            .get(&traj.id)
            .and_then(|r| r.get(&turn_index))
            .copied()
            .unwrap_or(0.0)
    }
}

/// `R_GE - sum of agent-turn predictions`, summed in turn order.
pub fn residual(predictor: &impl TurnPredictor, traj: &Trajectory) -> f64 {
    traj.global_reward - ordered_sum(traj.agent_turns().map(|t| predictor.predict_turn(traj, t.index)))
}

/// Mean over trajectories of the squared residual.
pub fn global_loss(predictor: &impl TurnPredictor, trajectories: &[Trajectory]) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let total = ordered_sum(trajectories.iter().map(|t| {
        let r = residual(predictor, t);
        r * r
    }));
    Ok(total / trajectories.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalDifference {
    pub delta: f64,
    pub positive_turns: usize,
    pub non_positive_turns: usize,
    pub unknown_turns: usize,
}

/// Pooled mean prediction on positive-affect agent turns minus the pooled
/// mean on non-positive ones. Turns with unknown affect (or missing from
/// `affect`) are excluded and counted separately.
pub fn local_difference(
    predictor: &impl TurnPredictor,
    trajectories: &[Trajectory],
    affect: &AffectIndex,
) -> Result<LocalDifference> {
    let mut pos = RunningMean::default();
    let mut neg = RunningMean::default();
    let mut unknown = 0;
    for traj in trajectories {
        let labels = affect.get(&traj.id);
        for turn in traj.agent_turns() {
            match labels.and_then(|l| l.get(&turn.index)).copied().unwrap_or(Affect::Unknown) {
                Affect::Positive => pos.push(predictor.predict_turn(traj, turn.index)),
                Affect::NonPositive => neg.push(predictor.predict_turn(traj, turn.index)),
                Affect::Unknown => unknown += 1,
            }
        }
    }
    match (pos.mean(), neg.mean()) {
        (Some(p), Some(n)) => Ok(LocalDifference {
            delta: p - n,
            positive_turns: pos.count(),
            non_positive_turns: neg.count(),
            unknown_turns: unknown,
        }),
        _ => Err(Error::InsufficientSupport {
            positive: pos.count(),
            non_positive: neg.count(),
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    #[serde(rename = "L_GE")]
    pub global_loss: f64,
    #[serde(rename = "delta_r_LI")]
    pub delta_r_li: f64,
    pub n_positive_turns: usize,
    pub n_nonpositive_turns: usize,
    pub n_unknown_turns: usize,
    pub consistency: Option<f64>,
    pub split: String,
}

/// Mean two-sample agreement over paired assignments of the same
/// trajectories.
pub fn pair_consistency(
    trajectories: &[Trajectory],
    pairs: &[(RewardAssignment, RewardAssignment)],
) -> Result<Option<ConsistencySummary>> {
    let mut values = Vec::with_capacity(pairs.len());
    for (a, b) in pairs {
        let traj = trajectories
            .iter()
            .find(|t| t.id == a.trajectory_id)
            .ok_or_else(|| Error::UnknownTrajectory(a.trajectory_id.clone()))?;
        values.push(consistency(traj, a, b)?);
    }
    Ok(ConsistencySummary::from_values(&values))
}

/// Fills every report field; `consistency` only when sample pairs are given.
pub fn evaluate(
    method: &str,
    predictor: &impl TurnPredictor,
    trajectories: &[Trajectory],
    affect: &AffectIndex,
    pairs: Option<&[(RewardAssignment, RewardAssignment)]>,
    split: &str,
) -> Result<MetricsReport> {
    let global = global_loss(predictor, trajectories)?;
    let local = local_difference(predictor, trajectories, affect)?;
    let consistency = match pairs {
        Some(p) => pair_consistency(trajectories, p)?.map(|s| s.mean),
        None => None,
    };
    Ok(MetricsReport {
        method: method.into(),
        global_loss: global,
        delta_r_li: local.delta,
        n_positive_turns: local.positive_turns,
        n_nonpositive_turns: local.non_positive_turns,
        n_unknown_turns: local.unknown_turns,
        consistency,
        split: split.into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Speaker, Turn};
    use alloc::vec;

    fn traj(id: &str, n_agent: usize, reward: f64) -> Trajectory {
        let turns = (0..n_agent)
            .map(|i| Turn::new(Speaker::Agent, "w", i as f64, i as f64 + 1.0))
            .collect();
        Trajectory::new(id, turns, reward, Speaker::User).unwrap()
    }

    #[test]
    fn global_loss_examples() {
        let one = |_: &Trajectory, _: usize| 1.0;
        assert_eq!(global_loss(&one, &[traj("a", 3, 6.0)]).unwrap(), 9.0);
        // residuals 3 and -1
        let ts = vec![traj("a", 3, 6.0), traj("b", 3, 2.0)];
        assert_eq!(global_loss(&one, &ts).unwrap(), 5.0);
        assert_eq!(global_loss(&one, &[]).unwrap_err().code(), "EMPTY_CORPUS");
    }

    fn affect_for(ts: &[Trajectory], labels: &[Affect]) -> AffectIndex {
        let mut it = labels.iter();
        ts.iter()
            .map(|t| {
                let m = t.agent_turn_indices().into_iter().map(|i| (i, *it.next().unwrap())).collect();
                (t.id.clone(), m)
            })
            .collect()
    }

    #[test]
    fn local_difference_example() {
        use Affect::*;
        let ts = vec![traj("a", 5, 1.0)];
        let affect = affect_for(&ts, &[Positive, Positive, NonPositive, NonPositive, Unknown]);
        let preds = [0.5, 0.7, 0.1, 0.3, 99.0];
        let p = |_: &Trajectory, i: usize| preds[i];
        let ld = local_difference(&p, &ts, &affect).unwrap();
        assert!((ld.delta - 0.4).abs() < 1e-12);
        assert_eq!((ld.positive_turns, ld.non_positive_turns, ld.unknown_turns), (2, 2, 1));
        let c = |_: &Trajectory, _: usize| 0.1;
        assert_eq!(local_difference(&c, &ts, &affect).unwrap().delta, 0.0);
        let only_pos = affect_for(&ts, &[Positive, Positive, Unknown, Unknown, Unknown]);
        assert_eq!(local_difference(&p, &ts, &only_pos).unwrap_err().code(), "INSUFFICIENT_SUPPORT");
    }

    #[test]
    fn replay_fills_missing_turns_with_zero() {
        let t = traj("a", 3, 5.0);
        let a = RewardAssignment::new(
            &t,
            crate::decompose::Method::Llm,
            BTreeMap::from([(0, 2.0), (2, 3.0)]),
            crate::decompose::Provenance {
                model_id: "mock".into(),
                sample_seed: 0,
                projected: false,
            },
        )
        .unwrap();
        let replay = AssignmentReplay::new([&a]);
        assert_eq!(replay.predict_turn(&t, 1), 0.0);
        assert_eq!(global_loss(&replay, &[t.clone()]).unwrap(), 0.0);
        assert_eq!(replay.predict_turn(&traj("other", 1, 1.0), 0), 0.0);
    }
}
