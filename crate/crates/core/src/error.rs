use alloc::string::String;

/// Errors raised by the decomposition toolkit.
///
/// Every variant maps to a stable machine-readable code via [`Error::code`].
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid {field}: {message}")]
    Validation { field: String, message: String },
    #[error("unknown trajectory `{0}`")]
    UnknownTrajectory(String),
    #[error("unknown feature channel `{0}`")]
    UnknownChannel(String),
    #[error("turn {0} is not an agent turn")]
    NotAgentTurn(usize),
    #[error("trajectory `{0}` has no agent turns")]
    NoAgentTurns(String),
    #[error("trajectory `{id}` has {turns} turns, more than the prompt limit of {limit}")]
    TooLong { id: String, turns: usize, limit: usize },
    #[error("no JSON object found in oracle response")]
    Unparseable,
    #[error("key `{0}` is not an agent-turn index")]
    BadKey(String),
    #[error("value for turn {key} is not a number")]
    BadValue { key: String },
    #[error("assignment has no annotated turns")]
    EmptyAssignment,
    #[error("oracle unavailable after {attempts} attempts: {last_error}")]
    OracleUnavailable { attempts: usize, last_error: String },
    #[error("oracle request rejected: {0}")]
    OracleRejected(String),
    #[error("assignments belong to different trajectories (`{0}` vs `{1}`)")]
    TrajectoryMismatch(String, String),
    #[error("all global rewards are equal ({0}); min-max normalization is undefined")]
    DegenerateCorpus(f64),
    #[error("split is empty")]
    EmptySplit,
    #[error("subsample size K must be at least 1")]
    BadK,
    #[error("no training pairs")]
    EmptyTrainingSet,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("insufficient support: {positive} positive and {non_positive} non-positive turns")]
    InsufficientSupport { positive: usize, non_positive: usize },
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("non-finite reward at step {0}")]
    NonFiniteReward(usize),
}

impl Error {
    /// Stable upper-case code used in machine-readable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "PARSE_ERROR",
            Error::Validation { .. } => "VALIDATION_ERROR",
            Error::UnknownTrajectory(_) => "UNKNOWN_TRAJECTORY",
            Error::UnknownChannel(_) => "UNKNOWN_CHANNEL",
            Error::NotAgentTurn(_) => "NOT_AGENT_TURN",
            Error::NoAgentTurns(_) => "NO_AGENT_TURNS",
            Error::TooLong { .. } => "TOO_LONG",
            Error::Unparseable => "UNPARSEABLE",
            Error::BadKey(_) => "BAD_KEY",
            Error::BadValue { .. } => "BAD_VALUE",
            Error::EmptyAssignment => "EMPTY_ASSIGNMENT",
            Error::OracleUnavailable { .. } => "ORACLE_UNAVAILABLE",
            Error::OracleRejected(_) => "ORACLE_REJECTED",
            Error::TrajectoryMismatch(..) => "TRAJECTORY_MISMATCH",
            Error::DegenerateCorpus(_) => "DEGENERATE_CORPUS",
            Error::EmptySplit => "EMPTY_SPLIT",
            Error::BadK => "BAD_K",
            Error::EmptyTrainingSet => "EMPTY_TRAINING_SET",
            Error::EmptyCorpus => "EMPTY_CORPUS",
            Error::InsufficientSupport { .. } => "INSUFFICIENT_SUPPORT",
            Error::BadSpec(_) => "BAD_SPEC",
            Error::NonFiniteReward(_) => "NON_FINITE_REWARD",
        }
    }

    pub(crate) fn validation(field: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
