//! Dialogue data model: turns, trajectories, listener feature frames.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper end of the survey scale.
pub const MAX_GLOBAL_REWARD: f64 = 100.0;

/// Two-party speaker model. `Agent` is the scored speaker, `User` the
/// evaluating listener in the usual setup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Speaker {
    Agent,
    User,
}

impl Speaker {
    pub fn as_str(self) -> &'static str {
        match self {
            Speaker::Agent => "AGENT",
            Speaker::User => "USER",
        }
    }

    pub fn other(self) -> Speaker {
        match self {
            Speaker::Agent => Speaker::User,
            Speaker::User => Speaker::Agent,
        }
    }
}

impl FromStr for Speaker {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AGENT" => Ok(Speaker::Agent),
            "USER" => Ok(Speaker::User),
            other => Err(Error::validation("speaker", format!("`{other}` is not AGENT or USER"))),
        }
    }
}

impl fmt::Display for Speaker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The sixteen numeric listener channels. The declaration order is the
/// canonical rendering order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    F0,
    Intensity,
    Jitter,
    LogEnergy,
    Gaze,
    NodYes,
    NodNo,
    Smile,
    Anger,
    Contempt,
    Disgust,
    Fear,
    Happiness,
    Neutral,
    Sadness,
    Surprise,
}

impl Channel {
    pub const ALL: [Channel; 16] = [
        Channel::F0,
        Channel::Intensity,
        Channel::Jitter,
        Channel::LogEnergy,
        Channel::Gaze,
        Channel::NodYes,
        Channel::NodNo,
        Channel::Smile,
        Channel::Anger,
        Channel::Contempt,
        Channel::Disgust,
        Channel::Fear,
        Channel::Happiness,
        Channel::Neutral,
        Channel::Sadness,
        Channel::Surprise,
    ];

    /// The eight facial-expression classes.
    pub const EMOTIONS: [Channel; 8] = [
        Channel::Anger,
        Channel::Contempt,
        Channel::Disgust,
        Channel::Fear,
        Channel::Happiness,
        Channel::Neutral,
        Channel::Sadness,
        Channel::Surprise,
    ];

    /// Continuous prosodic channels, binned by corpus tertiles.
    pub const ACOUSTIC: [Channel; 4] = [Channel::F0, Channel::Intensity, Channel::Jitter, Channel::LogEnergy];

    pub fn name(self) -> &'static str {
        match self {
            Channel::F0 => "f0",
            Channel::Intensity => "intensity",
            Channel::Jitter => "jitter",
            Channel::LogEnergy => "log_energy",
            Channel::Gaze => "gaze",
            Channel::NodYes => "nod_yes",
            Channel::NodNo => "nod_no",
            Channel::Smile => "smile",
            Channel::Anger => "anger",
            Channel::Contempt => "contempt",
            Channel::Disgust => "disgust",
            Channel::Fear => "fear",
            Channel::Happiness => "happiness",
            Channel::Neutral => "neutral",
            Channel::Sadness => "sadness",
            Channel::Surprise => "surprise",
        }
    }

    pub fn is_emotion(self) -> bool {
        self >= Channel::Anger
    }

    pub fn is_acoustic(self) -> bool {
        self <= Channel::LogEnergy
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Channel::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownChannel(s.into()))
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub speaker: Speaker,
    pub text: String,
    pub t_start: f64,
    pub t_end: f64,
}

impl Turn {
    /// A turn whose index is assigned when the trajectory is built.
    pub fn new(speaker: Speaker, text: impl Into<String>, t_start: f64, t_end: f64) -> Self {
        Self {
            index: 0,
            speaker,
            text: text.into(),
            t_start,
            t_end,
        }
    }

    pub fn is_agent(&self) -> bool {
        self.speaker == Speaker::Agent
    }
}

/// One dialogue session with its global score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: String,
    pub turns: Vec<Turn>,
    pub global_reward: f64,
    pub listener_speaker: Speaker,
}

impl Trajectory {
    /// Builds a validated trajectory; turn indices are renumbered `0..T` in
    /// the given (time) order.
    pub fn new(id: impl Into<String>, turns: Vec<Turn>, global_reward: f64, listener: Speaker) -> Result<Self> {
        let mut traj = Trajectory {
            id: id.into(),
            turns,
            global_reward,
            listener_speaker: listener,
        };
        for (i, turn) in traj.turns.iter_mut().enumerate() {
            turn.index = i;
        }
        traj.validate()?;
        Ok(traj)
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::validation("id", "trajectory id is empty"));
        }
        if !(0.0..=MAX_GLOBAL_REWARD).contains(&self.global_reward) {
            return Err(Error::validation(
                "global_reward",
                format!("{} is outside [0, {MAX_GLOBAL_REWARD}]", self.global_reward),
            ));
        }
        if self.turns.is_empty() {
            return Err(Error::validation("turns", "dialogue is empty"));
        }
        let mut prev_start = 0.0;
        for (i, turn) in self.turns.iter().enumerate() {
            if turn.index != i {
                return Err(Error::validation("index", format!("turn {i} carries index {}", turn.index)));
            }
            if !turn.t_start.is_finite() || !turn.t_end.is_finite() || turn.t_start < 0.0 {
                return Err(Error::validation("t_start", format!("turn {i} has invalid times")));
            }
            if turn.t_end < turn.t_start {
                return Err(Error::validation("t_end", format!("turn {i} ends before it starts")));
            }
            if turn.t_start < prev_start {
                return Err(Error::validation("t_start", format!("turn {i} starts before turn {}", i - 1)));
            }
            prev_start = turn.t_start;
        }
        if !self.turns.iter().any(Turn::is_agent) {
            return Err(Error::validation("turns", "no AGENT turn"));
        }
        Ok(())
    }

    /// The agent turns, in order.
    pub fn agent_turns(&self) -> impl Iterator<Item = &Turn> + '_ {
        self.turns.iter().filter(|t| t.is_agent())
    }

    pub fn agent_turn_indices(&self) -> Vec<usize> {
        self.agent_turns().map(|t| t.index).collect()
    }

    pub fn agent_turn_count(&self) -> usize {
        self.agent_turns().count()
    }

    pub fn is_agent_turn(&self, index: usize) -> bool {
        self.turns.get(index).is_some_and(Turn::is_agent)
    }

    pub(crate) fn require_agent_turn(&self, index: usize) -> Result<&Turn> {
        match self.turns.get(index) {
            Some(t) if t.is_agent() => Ok(t),
            _ => Err(Error::NotAgentTurn(index)),
        }
    }
}

/// Free-function form of [`Trajectory::agent_turns`].
pub fn agent_turns(traj: &Trajectory) -> Vec<&Turn> {
    traj.agent_turns().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFrame {
    pub trajectory_id: String,
    pub speaker: Speaker,
    pub timestamp: f64,
    pub channel: Channel,
    pub value: f64,
}

impl FeatureFrame {
    pub fn validate(&self) -> Result<()> {
        if !self.value.is_finite() {
            return Err(Error::validation("value", format!("{} value is not finite", self.channel)));
        }
        if !self.timestamp.is_finite() || self.timestamp < 0.0 {
            return Err(Error::validation("timestamp_s", format!("{} is not a valid time", self.timestamp)));
        }
        if self.channel.is_emotion() && !(0.0..=1.0).contains(&self.value) {
            return Err(Error::validation(
                self.channel.name(),
                format!("probability {} is outside [0, 1]", self.value),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    RewardTrain,
    Rl,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::RewardTrain => "REWARD_TRAIN",
            Split::Rl => "RL",
            Split::Test => "TEST",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "REWARD_TRAIN" | "train" => Ok(Split::RewardTrain),
            "RL" | "rl" => Ok(Split::Rl),
            "TEST" | "test" => Ok(Split::Test),
            other => Err(Error::validation("split", format!("unknown split `{other}`"))),
        }
    }
}

/// Trajectories of one split plus their feature frames, grouped by
/// trajectory id and sorted by timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub split: Split,
    pub trajectories: Vec<Trajectory>,
    frames: BTreeMap<String, Vec<FeatureFrame>>,
}

impl Corpus {
    pub fn new(split: Split, trajectories: Vec<Trajectory>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &trajectories {
            t.validate()?;
            if !seen.insert(t.id.as_str()) {
                return Err(Error::validation("id", format!("duplicate trajectory id `{}`", t.id)));
            }
        }
        Ok(Self {
            split,
            trajectories,
            frames: BTreeMap::new(),
        })
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn get(&self, id: &str) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    /// Attaches frames; rejects frames for unknown trajectories or with
    /// out-of-range values. Nothing is attached if any frame is rejected.
    pub fn attach_frames(&mut self, frames: impl IntoIterator<Item = FeatureFrame>) -> Result<usize> {
        let known: BTreeSet<&str> = self.trajectories.iter().map(|t| t.id.as_str()).collect();
        let mut staged: BTreeMap<String, Vec<FeatureFrame>> = BTreeMap::new();
        let mut count = 0;
        for frame in frames {
            if !known.contains(frame.trajectory_id.as_str()) {
                return Err(Error::UnknownTrajectory(frame.trajectory_id));
            }
            frame.validate()?;
            staged.entry(frame.trajectory_id.clone()).or_default().push(frame);
            count += 1;
        }
        for (id, mut new) in staged {
            let slot = self.frames.entry(id).or_default();
            slot.append(&mut new);
            slot.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        }
        Ok(count)
    }

    pub fn frames_for(&self, trajectory_id: &str) -> &[FeatureFrame] {
        self.frames.get(trajectory_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn frame_count(&self) -> usize {
        self.frames.values().map(Vec::len).sum()
    }

    /// All frames, grouped by trajectory id in id order.
    pub fn frames(&self) -> impl Iterator<Item = &FeatureFrame> + '_ {
        self.frames.values().flatten()
    }

    pub fn clear_frames(&mut self) {
        self.frames.clear();
    }
}

/// Checks that no trajectory id appears in more than one split.
pub fn check_disjoint(splits: &[&Corpus]) -> Result<()> {
    let mut owner: BTreeMap<&str, Split> = BTreeMap::new();
    for corpus in splits {
        for t in &corpus.trajectories {
            if let Some(prev) = owner.insert(t.id.as_str(), corpus.split) {
                return Err(Error::validation(
                    "split",
                    format!("trajectory `{}` is in both {} and {}", t.id, prev.as_str(), corpus.split.as_str()),
                ));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn turns(speakers: &[Speaker]) -> Vec<Turn> {
        speakers
            .iter()
            .enumerate()
            .map(|(i, s)| Turn::new(*s, "hi", i as f64, i as f64 + 1.0))
            .collect()
    }

    #[test]
    fn agent_turns_keeps_order() {
        use Speaker::*;
        let t = Trajectory::new("d", turns(&[Agent, User, Agent, User]), 50.0, User).unwrap();
        assert_eq!(t.agent_turn_indices(), vec![0, 2]);
        let single = Trajectory::new("s", turns(&[Agent]), 50.0, User).unwrap();
        assert_eq!(agent_turns(&single).len(), 1);
    }

    #[test]
    fn all_user_trajectory_is_rejected_but_has_no_agent_turns() {
        let t = Trajectory {
            id: "u".into(),
            turns: turns(&[Speaker::User, Speaker::User]),
            global_reward: 10.0,
            listener_speaker: Speaker::User,
        };
        assert!(agent_turns(&t).is_empty());
        assert_eq!(t.validate().unwrap_err().code(), "VALIDATION_ERROR");
    }

    #[test]
    fn reward_range_is_enforced() {
        for bad in [-0.5, 100.01, 120.0, f64::NAN] {
            let err = Trajectory::new("d", turns(&[Speaker::Agent]), bad, Speaker::User).unwrap_err();
            match err {
                Error::Validation { field, .. } => assert_eq!(field, "global_reward"),
                other => panic!("unexpected {other:?}"),
            }
        }
        assert!(Trajectory::new("d", turns(&[Speaker::Agent]), 100.0, Speaker::User).is_ok());
        assert!(Trajectory::new("d", turns(&[Speaker::Agent]), 0.0, Speaker::User).is_ok());
    }

    #[test]
    fn non_monotone_times_are_rejected() {
        let mut ts = turns(&[Speaker::Agent, Speaker::User]);
        ts[1].t_start = 0.5;
        ts[0].t_start = 0.7;
        assert!(Trajectory::new("d", ts, 1.0, Speaker::User).is_err());
        let mut ts = turns(&[Speaker::Agent]);
        ts[0].t_end = -1.0;
        assert!(Trajectory::new("d", ts, 1.0, Speaker::User).is_err());
    }

    #[test]
    fn frames_validate_channel_and_range() {
        let t = Trajectory::new("d1", turns(&[Speaker::Agent, Speaker::User]), 50.0, Speaker::User).unwrap();
        let mut c = Corpus::new(Split::RewardTrain, vec![t]).unwrap();
        let frame = |id: &str, ch: Channel, v: f64| FeatureFrame {
            trajectory_id: id.into(),
            speaker: Speaker::User,
            timestamp: 3.2,
            channel: ch,
            value: v,
        };
        assert_eq!(c.attach_frames([frame("d1", Channel::Happiness, 0.9)]).unwrap(), 1);
        assert_eq!(c.frames_for("d1").len(), 1);
        assert_eq!(
            c.attach_frames([frame("d1", Channel::Happiness, 1.4)]).unwrap_err().code(),
            "VALIDATION_ERROR"
        );
        assert_eq!(
            c.attach_frames([frame("zz", Channel::Happiness, 0.4)]).unwrap_err().code(),
            "UNKNOWN_TRAJECTORY"
        );
        assert_eq!("pitch".parse::<Channel>().unwrap_err().code(), "UNKNOWN_CHANNEL");
        // f0 is not a probability
        assert!(c.attach_frames([frame("d1", Channel::F0, 180.0)]).is_ok());
    }

    #[test]
    fn channel_names_round_trip() {
        for ch in Channel::ALL {
            assert_eq!(ch.name().parse::<Channel>().unwrap(), ch);
        }
        assert_eq!(Channel::EMOTIONS.iter().filter(|c| c.is_emotion()).count(), 8);
        assert_eq!(Channel::ALL.iter().filter(|c| c.is_acoustic()).count(), 4);
    }

    #[test]
    fn splits_must_be_disjoint() {
        let t = || Trajectory::new("d1", turns(&[Speaker::Agent]), 5.0, Speaker::User).unwrap();
        let a = Corpus::new(Split::RewardTrain, vec![t()]).unwrap();
        let b = Corpus::new(Split::Test, vec![t()]).unwrap();
        assert!(check_disjoint(&[&a, &b]).is_err());
        let c = Corpus::new(Split::Rl, vec![]).unwrap();
        assert!(check_disjoint(&[&a, &c]).is_ok());
    }
}
