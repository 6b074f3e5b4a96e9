//! Listener feature aggregation and natural-language descriptor lines.
//!
//! Each agent turn is summarized by the mean of the listener's frames that
//! fall in the turn's half-open window `[t_start, t_end)`. Summaries are
//! rendered as a single bracketed line, e.g.
//! `[listener: gaze=1.00 (on-screen), happiness=0.70 (high)]`.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::{Channel, Corpus, FeatureFrame, Trajectory, Turn};
use crate::error::Result;
use crate::math::RunningMean;

/// Listener affect polarity for one agent turn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Affect {
    Positive,
    NonPositive,
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnFeatureSummary {
    pub turn_index: usize,
    pub channel_means: BTreeMap<Channel, f64>,
    pub frame_count: usize,
    pub affect_positive: Affect,
}

impl TurnFeatureSummary {
    pub fn empty(turn_index: usize) -> Self {
        Self {
            turn_index,
            channel_means: BTreeMap::new(),
            frame_count: 0,
            affect_positive: Affect::Unknown,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescribedTurn {
    pub turn: Turn,
    pub descriptor_text: String,
}

/// Positive iff happiness is the strict argmax of the emotion means present.
pub fn affect_polarity(means: &BTreeMap<Channel, f64>) -> Affect {
    let Some(&happiness) = means.get(&Channel::Happiness) else {
        return if Channel::EMOTIONS.iter().any(|c| means.contains_key(c)) {
            Affect::NonPositive
        } else {
            Affect::Unknown
        };
    };
    let beaten = Channel::EMOTIONS
        .iter()
        .filter(|&&c| c != Channel::Happiness)
        .filter_map(|c| means.get(c))
        .all(|&other| happiness > other);
    if beaten {
        Affect::Positive
    } else {
        Affect::NonPositive
    }
}

/// Aggregates the listener's frames inside an agent turn's window.
pub fn summarize_turn(traj: &Trajectory, turn_index: usize, frames: &[FeatureFrame]) -> Result<TurnFeatureSummary> {
    let turn = traj.require_agent_turn(turn_index)?;
    let mut acc: BTreeMap<Channel, RunningMean> = BTreeMap::new();
    let mut frame_count = 0;
    for frame in frames {
        if frame.speaker != traj.listener_speaker
            || frame.trajectory_id != traj.id
            || frame.timestamp < turn.t_start
            || frame.timestamp >= turn.t_end
        {
            continue;
        }
        acc.entry(frame.channel).or_default().push(frame.value);
        frame_count += 1;
    }
    let channel_means: BTreeMap<Channel, f64> =
        acc.into_iter().filter_map(|(c, m)| m.mean().map(|v| (c, v))).collect();
    let affect_positive = affect_polarity(&channel_means);
    Ok(TurnFeatureSummary {
        turn_index,
        channel_means,
        frame_count,
        affect_positive,
    })
}

/// Summaries for every agent turn of a trajectory, in turn order.
pub fn summarize_trajectory(traj: &Trajectory, frames: &[FeatureFrame]) -> Vec<TurnFeatureSummary> {
    traj.agent_turns()
        .map(|t| summarize_turn(traj, t.index, frames).expect("agent turn"))
        .collect()
}

/// Per-trajectory, per-agent-turn affect labels.
pub type AffectIndex = BTreeMap<String, BTreeMap<usize, Affect>>;

pub fn affect_index(corpus: &Corpus) -> AffectIndex {
    corpus
        .trajectories
        .iter()
        .map(|t| {
            let labels = summarize_trajectory(t, corpus.frames_for(&t.id))
                .into_iter()
                .map(|s| (s.turn_index, s.affect_positive))
                .collect();
            (t.id.clone(), labels)
        })
        .collect()
}

/// Tertile edges `[e1, e2]` for the continuous acoustic channels.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BinEdges(pub BTreeMap<Channel, [f64; 2]>);

impl BinEdges {
    /// Tertiles (linear interpolation between order statistics) of the
    /// per-agent-turn listener means in `corpus`.
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let mut values: BTreeMap<Channel, Vec<f64>> = BTreeMap::new();
        for traj in &corpus.trajectories {
            for summary in summarize_trajectory(traj, corpus.frames_for(&traj.id)) {
                for ch in Channel::ACOUSTIC {
                    if let Some(&v) = summary.channel_means.get(&ch) {
                        values.entry(ch).or_default().push(v);
                    }
                }
            }
        }
        let edges = values
            .into_iter()
            .map(|(ch, mut v)| {
                v.sort_by(f64::total_cmp);
                (ch, [quantile_sorted(&v, 1.0 / 3.0), quantile_sorted(&v, 2.0 / 3.0)])
            })
            .collect();
        BinEdges(edges)
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

fn bin_label(channel: Channel, value: f64, edges: &BinEdges) -> Option<&'static str> {
    match channel {
        Channel::Gaze => Some(if value >= 0.5 { "on-screen" } else { "off-screen" }),
        Channel::NodYes | Channel::NodNo | Channel::Smile => Some(if value >= 0.5 { "present" } else { "absent" }),
        c if c.is_acoustic() => edges.0.get(&c).map(|[lo, hi]| {
            if value < *lo {
                "low"
            } else if value < *hi {
                "mid"
            } else {
                "high"
            }
        }),
        _ => Some(if value < 0.33 {
            "low"
        } else if value < 0.66 {
            "mid"
        } else {
            "high"
        }),
    }
}

/// Renders a summary as one descriptor line; empty when no frames fell in
/// the window. Acoustic channels without bin edges are rendered unbinned.
pub fn render_descriptor(summary: &TurnFeatureSummary, edges: &BinEdges) -> String {
    if summary.frame_count == 0 || summary.channel_means.is_empty() {
        return String::new();
    }
    let mut out = String::from("[listener: ");
    for (i, (channel, value)) in summary.channel_means.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{}={:.2}", channel.name(), value);
        if let Some(label) = bin_label(*channel, *value, edges) {
            let _ = write!(out, " ({label})");
        }
    }
    out.push(']');
    out
}

/// One described turn per input turn; only agent turns get descriptors.
pub fn describe_trajectory(traj: &Trajectory, frames: &[FeatureFrame], edges: &BinEdges) -> Vec<DescribedTurn> {
    traj.turns
        .iter()
        .map(|turn| {
            let descriptor_text = if turn.is_agent() {
                let summary = summarize_turn(traj, turn.index, frames).expect("agent turn");
                render_descriptor(&summary, edges)
            } else {
                String::new()
            };
            DescribedTurn {
                turn: turn.clone(),
                descriptor_text,
            }
        })
        .collect()
}

/// Described turns for a trajectory with no features (text-only input).
pub fn undescribed(traj: &Trajectory) -> Vec<DescribedTurn> {
    traj.turns
        .iter()
        .map(|turn| DescribedTurn {
            turn: turn.clone(),
            descriptor_text: String::new(),
        })
        .collect()
}

impl DescribedTurn {
    pub fn has_descriptor(&self) -> bool {
        !self.descriptor_text.is_empty()
    }
}
