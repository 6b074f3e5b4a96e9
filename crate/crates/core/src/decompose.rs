//! Session-score decomposition through a prompted chat oracle.
//!
//! The oracle sees the transcript (optionally with listener descriptor
//! lines) and the session score, and answers with a JSON object mapping
//! agent-turn indices to rewards. Answers are kept raw; projection onto the
//! sum constraint is a separate opt-in step.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::fmt::Write;
use core::time::Duration;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Speaker, Trajectory};
use crate::descriptors::DescribedTurn;
use crate::error::{Error, Result};
use crate::math::{self, ordered_sum, RunningMean};

/// Which procedure produced an assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Llm,
    MmLlm,
    Uniform,
    Ircr,
    Rudder,
    Rrd,
    Mean,
    Mode,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Llm => "LLM",
            Method::MmLlm => "MM_LLM",
            Method::Uniform => "UNIFORM",
            Method::Ircr => "IRCR",
            Method::Rudder => "RUDDER",
            Method::Rrd => "RRD",
            Method::Mean => "MEAN",
            Method::Mode => "MODE",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Oracle model id, `"mock"`, or the baseline name.
    pub model_id: String,
    pub sample_seed: u64,
    pub projected: bool,
}

/// Per-agent-turn rewards for one trajectory. Missing keys are turns the
/// method left unannotated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardAssignment {
    pub trajectory_id: String,
    pub method: Method,
    pub rewards: BTreeMap<usize, f64>,
    /// `R_GE - sum(rewards)`.
    pub residual: f64,
    pub provenance: Provenance,
}

impl RewardAssignment {
    /// Builds an assignment and computes its residual against the
    /// trajectory's global reward.
    pub fn new(traj: &Trajectory, method: Method, rewards: BTreeMap<usize, f64>, provenance: Provenance) -> Result<Self> {
        if let Some(&bad) = rewards.keys().find(|&&k| !traj.is_agent_turn(k)) {
            return Err(Error::BadKey(bad.to_string()));
        }
        let residual = traj.global_reward - ordered_sum(rewards.values().copied());
        Ok(Self {
            trajectory_id: traj.id.clone(),
            method,
            rewards,
            residual,
            provenance,
        })
    }

    pub fn total(&self) -> f64 {
        ordered_sum(self.rewards.values().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PromptVariant {
    TextOnly,
    Multimodal,
}

impl PromptVariant {
    pub fn method(self) -> Method {
        match self {
            PromptVariant::TextOnly => Method::Llm,
            PromptVariant::Multimodal => Method::MmLlm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    pub system_text: String,
    pub user_text: String,
    pub trajectory_id: String,
    pub variant: PromptVariant,
}

const SYSTEM_PREFIX: &str = "You assign per-utterance credit for a conversation's overall score.";
/// Marker the system message uses to name the conversation.
pub const CONVERSATION_ID_PREFIX: &str = "Conversation ID: ";

const TEMPLATE_HEAD: &str = "You are given a final scalar score for Speaker A, indicating how much Speaker B \
experienced positive feelings (e.g., good, pleasant, happy) or negative feelings (e.g., bad, unpleasant, unhappy) \
during the conversation.";
const TEMPLATE_BODY: &str = "Below, you are given the full conversation with aligned multimodal conversational \
features. Consider the utterances and the features, focusing on the utterances of Speaker A and the reactions of \
Speaker B. Redistribute the score across each of Speaker A\u{2019}s utterances.";
const TEMPLATE_SALIENT: &str = "Whenever you identify a salient, important utterance that contributed positively \
or negatively to the final reward score, assign a numerical value (which may be positive, negative, or zero) \
representing its contribution.";
const FORMAT_INSTRUCTION: &str = "Answer with a single JSON object and nothing else. Its keys are the turn numbers \
of the Speaker A utterances you scored (as strings) and its values are the numbers you assigned, for example \
{\"<turn number>\": <score>, ...}. Leave out Speaker A utterances you did not score.";

fn speaker_label(s: Speaker) -> &'static str {
    match s {
        Speaker::Agent => "Speaker A",
        Speaker::User => "Speaker B",
    }
}

/// Renders the decomposition prompt. The transcript lists each turn as
/// `Turn <index> (Speaker A|Speaker B): <text>`; in the multimodal variant
/// a non-empty descriptor line follows its utterance.
pub fn build_prompt(
    traj: &Trajectory,
    described: &[DescribedTurn],
    variant: PromptVariant,
    max_prompt_turns: usize,
) -> Result<PromptBundle> {
    if traj.agent_turn_count() == 0 {
        return Err(Error::NoAgentTurns(traj.id.clone()));
    }
    if traj.turns.len() > max_prompt_turns {
        return Err(Error::TooLong {
            id: traj.id.clone(),
            turns: traj.turns.len(),
            limit: max_prompt_turns,
        });
    }
    let descriptors: BTreeMap<usize, &str> = described
        .iter()
        .filter(|d| d.has_descriptor())
        .map(|d| (d.turn.index, d.descriptor_text.as_str()))
        .collect();
    let score = traj.global_reward;
    let mut user = String::new();
    let _ = write!(
        user,
        "{TEMPLATE_HEAD}\n\nFinal score: {score}\n{TEMPLATE_BODY}\n\n{TEMPLATE_SALIENT}\n\nAll of the assigned scores must sum up to:{score}.\n\n"
    );
    for turn in &traj.turns {
        let _ = writeln!(user, "Turn {} ({}): {}", turn.index, speaker_label(turn.speaker), turn.text);
        if variant == PromptVariant::Multimodal {
            if let Some(line) = descriptors.get(&turn.index) {
                let _ = writeln!(user, "{line}");
            }
        }
    }
    let _ = write!(user, "\n{FORMAT_INSTRUCTION}");
    Ok(PromptBundle {
        system_text: format!("{SYSTEM_PREFIX}\n{CONVERSATION_ID_PREFIX}{}", traj.id),
        user_text: user,
        trajectory_id: traj.id.clone(),
        variant,
    })
}

fn first_json_object(raw: &str) -> Option<serde_json::Map<String, serde_json::Value>> {
    raw.match_indices('{').find_map(|(i, _)| {
        let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<serde_json::Value>();
        match stream.next() {
            Some(Ok(serde_json::Value::Object(map))) => Some(map),
            _ => None,
        }
    })
}

/// Extracts per-turn rewards from an oracle answer. Text around the first
/// JSON object is ignored.
pub fn parse_response(
    raw: &str,
    traj: &Trajectory,
    method: Method,
    provenance: Provenance,
) -> Result<RewardAssignment> {
    let object = first_json_object(raw).ok_or(Error::Unparseable)?;
    let mut rewards = BTreeMap::new();
    for (key, value) in object {
        let index: usize = key.trim().parse().map_err(|_| Error::BadKey(key.clone()))?;
        if !traj.is_agent_turn(index) {
            return Err(Error::BadKey(key));
        }
        let reward = value.as_f64().ok_or_else(|| Error::BadValue { key: key.clone() })?;
        rewards.insert(index, reward);
    }
    RewardAssignment::new(traj, method, rewards, provenance)
}

/// Shifts every annotated reward by `residual / n` so the annotated rewards
/// sum to `global_reward`. Ordering between rewards is preserved.
pub fn project_to_constraint(a: &RewardAssignment, global_reward: f64) -> Result<RewardAssignment> {
    if a.rewards.is_empty() {
        return Err(Error::EmptyAssignment);
    }
    let mut out = a.clone();
    let residual = global_reward - a.total();
    let delta = residual / a.rewards.len() as f64;
    for r in out.rewards.values_mut() {
        *r += delta;
    }
    out.residual = global_reward - out.total();
    out.provenance.projected = true;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub endpoint_url: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_retries: usize,
    pub timeout: Duration,
    pub max_prompt_turns: usize,
    /// First retry delay; doubles on each further retry.
    pub backoff_base: Duration,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            endpoint_url: String::new(),
            model_id: "o3-mini".into(),
            temperature: 1.0,
            max_retries: 3,
            timeout: Duration::from_secs(120),
            max_prompt_turns: 400,
            backoff_base: Duration::from_secs(1),
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout.is_zero() {
            return Err(Error::validation("timeout", "must be positive"));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::validation("temperature", "must be non-negative"));
        }
        Ok(())
    }

    /// Delay before retry number `retry` (0-based): `base * 2^retry`, scaled
    /// by a jitter factor in `[0.5, 1)`.
    pub fn backoff_delay(&self, retry: usize, jitter: f64) -> Duration {
        let factor = (1u64 << retry.min(20)) as f64 * (0.5 + 0.5 * jitter);
        self.backoff_base.mul_f64(factor)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// A chat-completion request. `sample_seed` is not sent over the wire; it
/// lets deterministic oracles vary between samples.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
    pub sample_seed: u64,
}

impl ChatRequest {
    pub fn from_prompt(prompt: &PromptBundle, cfg: &OracleConfig, sample_seed: u64) -> Self {
        Self {
            model: cfg.model_id.clone(),
            temperature: cfg.temperature,
            messages: alloc::vec![
                ChatMessage {
                    role: "system".into(),
                    content: prompt.system_text.clone(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: prompt.user_text.clone(),
                },
            ],
            sample_seed,
        }
    }

    /// The conversation id named in the system message, if any.
    pub fn conversation_id(&self) -> Option<&str> {
        self.messages
            .iter()
            .filter(|m| m.role == "system")
            .flat_map(|m| m.content.lines())
            .find_map(|line| line.strip_prefix(CONVERSATION_ID_PREFIX))
            .map(str::trim)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum OracleError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed oracle reply: {0}")]
    Protocol(String),
    #[error("unknown trajectory `{0}`")]
    UnknownTrajectory(String),
}

impl OracleError {
    /// Transport failures and 5xx replies are retried; nothing else is.
    pub fn is_retryable(&self) -> bool {
        match self {
            OracleError::Transport(_) => true,
            OracleError::Status { status, .. } => (500..600).contains(status),
            _ => false,
        }
    }
}

/// A chat-completion backend.
pub trait ChatOracle {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, OracleError>;

    /// Waits between retries. The default does not wait.
    fn backoff(&mut self, _delay: Duration) {}
}

impl<O: ChatOracle + ?Sized> ChatOracle for &mut O {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, OracleError> {
        (**self).complete(request)
    }

    fn backoff(&mut self, delay: Duration) {
        (**self).backoff(delay)
    }
}

/// Per-call decomposition settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecomposeOptions {
    pub variant: PromptVariant,
    pub project: bool,
    pub seed: u64,
}

/// Prompt, query (with retries), parse and optionally project.
pub fn decompose<O: ChatOracle + ?Sized>(
    traj: &Trajectory,
    described: &[DescribedTurn],
    opts: DecomposeOptions,
    cfg: &OracleConfig,
    oracle: &mut O,
) -> Result<RewardAssignment> {
    cfg.validate()?;
    let prompt = build_prompt(traj, described, opts.variant, cfg.max_prompt_turns)?;
    let request = ChatRequest::from_prompt(&prompt, cfg, opts.seed);
    let mut jitter = math::rng(math::derive_seed(opts.seed, traj.id.as_bytes()));
    let attempts = cfg.max_retries + 1;
    let mut raw = None;
    let mut last_error = String::new();
    for attempt in 0..attempts {
        match oracle.complete(&request) {
            Ok(text) => {
                raw = Some(text);
                break;
            }
            Err(OracleError::UnknownTrajectory(id)) => return Err(Error::UnknownTrajectory(id)),
            Err(e) if e.is_retryable() => {
                last_error = e.to_string();
                if attempt + 1 < attempts {
                    oracle.backoff(cfg.backoff_delay(attempt, jitter.random::<f64>()));
                }
            }
            Err(e) => return Err(Error::OracleRejected(e.to_string())),
        }
    }
    let raw = raw.ok_or(Error::OracleUnavailable { attempts, last_error })?;
    let provenance = Provenance {
        model_id: cfg.model_id.clone(),
        sample_seed: opts.seed,
        projected: false,
    };
    let assignment = parse_response(&raw, traj, opts.variant.method(), provenance)?;
    if opts.project {
        project_to_constraint(&assignment, traj.global_reward)
    } else {
        Ok(assignment)
    }
}

/// Three-way label used by the agreement protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TurnClass {
    Positive,
    NegativeOrNeutral,
    Unannotated,
}

pub fn classify(a: &RewardAssignment, turn_index: usize) -> TurnClass {
    match a.rewards.get(&turn_index) {
        Some(&r) if r > 0.0 => TurnClass::Positive,
        Some(_) => TurnClass::NegativeOrNeutral,
        None => TurnClass::Unannotated,
    }
}

/// Fraction of the trajectory's agent turns on which two assignments give
/// the same three-way label.
pub fn consistency(traj: &Trajectory, a: &RewardAssignment, b: &RewardAssignment) -> Result<f64> {
    for other in [a, b] {
        if other.trajectory_id != traj.id {
            return Err(Error::TrajectoryMismatch(traj.id.clone(), other.trajectory_id.clone()));
        }
    }
    let agent = traj.agent_turn_indices();
    if agent.is_empty() {
        return Err(Error::NoAgentTurns(traj.id.clone()));
    }
    let agree = agent.iter().filter(|&&i| classify(a, i) == classify(b, i)).count();
    Ok(agree as f64 / agent.len() as f64)
}

/// Mean and population standard deviation of per-conversation agreement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsistencySummary {
    pub mean: f64,
    pub std: f64,
    pub conversations: usize,
}

impl ConsistencySummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let mut m = RunningMean::default();
        values.iter().for_each(|&v| m.push(v));
        let mean = m.mean()?;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
        Some(Self {
            mean,
            std: libm::sqrt(var),
            conversations: m.count(),
        })
    }
}

impl fmt::Display for ConsistencySummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}% \u{00b1} {:.2}%", 100.0 * self.mean, 100.0 * self.std)
    }
}
