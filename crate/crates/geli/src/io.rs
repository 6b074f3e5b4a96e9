//! On-disk formats: transcript JSONL, feature CSV, assignment and truth
//! JSONL, model JSON, reports and curves. All writers return bytes; callers
//! persist them with [`write_atomic`] once every output is ready.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use geli_core::baselines::ReturnPredictor;
use geli_core::corpus::{Channel, Corpus, FeatureFrame, Speaker, Split, Trajectory, Turn};
use geli_core::decompose::{Method, RewardAssignment};
use geli_core::descriptors::{BinEdges, DescribedTurn};
use geli_core::metrics::MetricsReport;
use geli_core::reward_model::{Featurizer, RegressorKind, RewardModel, TrainingMeta};
use geli_core::rl::CurveRow;
use geli_core::synthetic::{HiddenTruth, TrajectoryTruth};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FEATURE_HEADER: [&str; 5] = ["trajectory_id", "speaker", "timestamp_s", "channel", "value"];
pub const SCHEMA_VERSION: u32 = 1;

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, message: impl ToString) -> Error {
    Error::File {
        path: path.into(),
        source: geli_core::Error::Parse {
            line,
            message: message.to_string(),
        },
    }
}

/// Parses one JSON value per non-blank line.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| parse_error(path, i + 1, e))?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).expect("in-memory JSON");
        out.push(b'\n');
    }
    out
}

fn pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("in-memory JSON");
    out.push(b'\n');
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurnRecord {
    speaker: Speaker,
    text: String,
    t_start: f64,
    t_end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    descriptor: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajectoryRecord {
    id: String,
    global_reward: f64,
    listener: Speaker,
    turns: Vec<TurnRecord>,
}

/// A transcript line: the trajectory plus any per-turn descriptors.
#[derive(Debug, Clone, PartialEq)]
pub struct Transcript {
    pub trajectory: Trajectory,
    pub descriptors: Vec<Option<String>>,
}

impl Transcript {
    pub fn has_descriptors(&self) -> bool {
        self.descriptors.iter().any(Option::is_some)
    }

    pub fn described(&self) -> Vec<DescribedTurn> {
        self.trajectory
            .turns
            .iter()
            .zip(&self.descriptors)
            .map(|(turn, d)| DescribedTurn {
                turn: turn.clone(),
                descriptor_text: d.clone().unwrap_or_default(),
            })
            .collect()
    }
}

pub fn read_transcripts(path: &Path) -> Result<Vec<Transcript>> {
    read_jsonl::<TrajectoryRecord>(path)?
        .into_iter()
        .map(|(line, rec)| {
            let descriptors = rec.turns.iter().map(|t| t.descriptor.clone()).collect();
            let turns = rec
                .turns
                .into_iter()
                .map(|t| Turn::new(t.speaker, t.text, t.t_start, t.t_end))
                .collect();
            let trajectory = Trajectory::new(rec.id, turns, rec.global_reward, rec.listener).map_err(|source| Error::AtLine {
                path: path.into(),
                line,
                source,
            })?;
            Ok(Transcript {
                trajectory,
                descriptors,
            })
        })
        .collect()
}

/// Serializes trajectories, attaching descriptors where given (empty
/// descriptors are omitted).
pub fn transcripts_jsonl<'a>(
    trajectories: impl IntoIterator<Item = &'a Trajectory>,
    descriptors: Option<&BTreeMap<String, Vec<DescribedTurn>>>,
) -> Vec<u8> {
    jsonl(trajectories.into_iter().map(|t| {
        let described = descriptors.and_then(|d| d.get(&t.id));
        TrajectoryRecord {
            id: t.id.clone(),
            global_reward: t.global_reward,
            listener: t.listener_speaker,
            turns: t
                .turns
                .iter()
                .map(|turn| TurnRecord {
                    speaker: turn.speaker,
                    text: turn.text.clone(),
                    t_start: turn.t_start,
                    t_end: turn.t_end,
                    descriptor: described
                        .and_then(|d| d.get(turn.index))
                        .filter(|d| d.has_descriptor())
                        .map(|d| d.descriptor_text.clone()),
                })
                .collect(),
        }
    }))
}

#[derive(Debug, Serialize)]
struct FrameRecord {
    trajectory_id: String,
    speaker: Speaker,
    timestamp_s: f64,
    channel: Channel,
    value: f64,
}

#[derive(Debug, Deserialize)]
struct RawFrameRecord {
    trajectory_id: String,
    speaker: String,
    timestamp_s: f64,
    channel: String,
    value: f64,
}

pub fn read_frames(path: &Path) -> Result<Vec<FeatureFrame>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| parse_error(path, 1, e))?;
    let header = reader.headers().map_err(|e| parse_error(path, 1, e))?;
    if header.iter().ne(FEATURE_HEADER) {
        return Err(parse_error(path, 1, format!("header must be exactly {}", FEATURE_HEADER.join(","))));
    }
    let mut frames = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_error(path, line, e)
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let rec: RawFrameRecord = record.deserialize(None).map_err(|e| parse_error(path, line, e))?;
        let at_line = |source| Error::AtLine {
            path: path.into(),
            line,
            source,
        };
        frames.push(FeatureFrame {
            trajectory_id: rec.trajectory_id,
            speaker: rec.speaker.parse().map_err(at_line)?,
            timestamp: rec.timestamp_s,
            channel: rec.channel.parse().map_err(at_line)?,
            value: rec.value,
        });
    }
    Ok(frames)
}

pub fn frames_csv<'a>(frames: impl IntoIterator<Item = &'a FeatureFrame>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for f in frames {
        w.serialize(FrameRecord {
            trajectory_id: f.trajectory_id.clone(),
            speaker: f.speaker,
            timestamp_s: f.timestamp,
            channel: f.channel,
            value: f.value,
        })
        .expect("in-memory CSV");
    }
    w.into_inner().expect("in-memory CSV")
}

/// Loads a transcript file and, optionally, its feature file.
pub fn load_corpus(transcripts: &Path, features: Option<&Path>, split: Split) -> Result<(Corpus, Vec<Transcript>)> {
    let records = read_transcripts(transcripts)?;
    let mut corpus = Corpus::new(split, records.iter().map(|r| r.trajectory.clone()).collect()).map_err(|source| Error::File {
        path: transcripts.into(),
        source,
    })?;
    if let Some(fp) = features {
        let frames = read_frames(fp)?;
        corpus.attach_frames(frames).map_err(|source| Error::File {
            path: fp.into(),
            source,
        })?;
    }
    Ok((corpus, records))
}

pub fn read_assignments(path: &Path) -> Result<Vec<RewardAssignment>> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, a)| a).collect())
}

pub fn assignments_jsonl(assignments: &[RewardAssignment]) -> Vec<u8> {
    jsonl(assignments)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthRecord {
    id: String,
    rewards: BTreeMap<usize, f64>,
    offset: f64,
    pre_clamp: f64,
    high_reward_turns: Vec<usize>,
}

pub fn read_truth(path: &Path) -> Result<HiddenTruth> {
    let mut truth = HiddenTruth::default();
    for (_, r) in read_jsonl::<TruthRecord>(path)? {
        truth.trajectories.insert(
            r.id,
            TrajectoryTruth {
                rewards: r.rewards,
                offset: r.offset,
                pre_clamp: r.pre_clamp,
                high_reward_turns: r.high_reward_turns,
            },
        );
    }
    Ok(truth)
}

pub fn truth_jsonl(truth: &HiddenTruth) -> Vec<u8> {
    jsonl(truth.trajectories.iter().map(|(id, t)| TruthRecord {
        id: id.clone(),
        rewards: t.rewards.clone(),
        offset: t.offset,
        pre_clamp: t.pre_clamp,
        high_reward_turns: t.high_reward_turns.clone(),
    }))
}

/// Persisted reward model. `source_method` names the decomposition the
/// model was distilled from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub schema_version: u32,
    pub source_method: Method,
    pub featurizer: Featurizer,
    pub kind: RegressorKind,
    pub training_meta: Option<TrainingMeta>,
    pub params: Vec<f64>,
}

impl ModelFile {
    pub fn new(model: &RewardModel, source_method: Method) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            source_method,
            featurizer: model.featurizer.clone(),
            kind: model.kind,
            training_meta: model.training_meta.clone(),
            params: model.params.clone(),
        }
    }

    pub fn model(&self) -> RewardModel {
        RewardModel {
            featurizer: self.featurizer.clone(),
            kind: self.kind,
            params: self.params.clone(),
            training_meta: self.training_meta.clone(),
        }
    }
}

fn check_schema(path: &Path, version: u32) -> Result<()> {
    if version != SCHEMA_VERSION {
        return Err(Error::File {
            path: path.into(),
            source: geli_core::Error::Validation {
                field: "schema_version".into(),
                message: format!("expected {SCHEMA_VERSION}, found {version}"),
            },
        });
    }
    Ok(())
}

pub fn read_model(path: &Path) -> Result<ModelFile> {
    let text = read_to_string(path)?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| parse_error(path, e.line(), e))?;
    check_schema(path, file.schema_version)?;
    file.model().validate().map_err(|source| Error::File {
        path: path.into(),
        source,
    })?;
    Ok(file)
}

pub fn model_json(file: &ModelFile) -> Vec<u8> {
    pretty(file)
}

#[derive(Debug, Serialize, Deserialize)]
struct PredictorFile {
    schema_version: u32,
    #[serde(flatten)]
    predictor: ReturnPredictor,
}

pub fn return_predictor_json(g: &ReturnPredictor) -> Vec<u8> {
    #[derive(Serialize)]
    struct Out<'a> {
        schema_version: u32,
        #[serde(flatten)]
        predictor: &'a ReturnPredictor,
    }
    pretty(&Out {
        schema_version: SCHEMA_VERSION,
        predictor: g,
    })
}

pub fn read_return_predictor(path: &Path) -> Result<ReturnPredictor> {
    let text = read_to_string(path)?;
    let file: PredictorFile = serde_json::from_str(&text).map_err(|e| parse_error(path, e.line(), e))?;
    check_schema(path, file.schema_version)?;
    Ok(file.predictor)
}

pub fn bins_json(edges: &BinEdges) -> Vec<u8> {
    pretty(edges)
}

pub fn read_bins(path: &Path) -> Result<BinEdges> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e.line(), e))
}

pub fn report_json(reports: &[MetricsReport]) -> Vec<u8> {
    pretty(&reports)
}

/// Table-style summary: `method,global_loss,local_difference`.
pub fn report_csv(reports: &[MetricsReport]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "global_loss", "local_difference"]).expect("in-memory CSV");
    for r in reports {
        w.write_record([r.method.clone(), r.global_loss.to_string(), r.delta_r_li.to_string()])
            .expect("in-memory CSV");
    }
    w.into_inner().expect("in-memory CSV")
}

pub fn loss_csv(curve: &[f64]) -> Vec<u8> {
    let mut out = String::from("epoch,mse\n");
    for (epoch, mse) in curve.iter().enumerate() {
        out.push_str(&format!("{epoch},{mse}\n"));
    }
    out.into_bytes()
}

pub fn curves_csv(rows: &[CurveRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory CSV");
    }
    w.into_inner().expect("in-memory CSV")
}

pub fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    pretty(value)
}

/// Writes via a temporary file in the target directory, then renames.
fn stage(path: &Path, bytes: &[u8]) -> Result<tempfile::NamedTempFile> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        tmp.as_file()
            .set_permissions(fs::Permissions::from_mode(0o644))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(tmp)
}

/// Writes to a temporary file beside `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    stage(path, bytes)?.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Outputs of one command, written together only after all were produced.
#[derive(Debug, Default)]
pub struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
}

impl Outputs {
    pub fn add(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.files.push((path, bytes));
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.files.iter().map(|(p, _)| p.as_path())
    }

    /// Stages every file first; nothing is renamed into place unless all of
    /// them were written.
    pub fn commit(self) -> Result<()> {
        let staged = self
            .files
            .iter()
            .map(|(path, bytes)| stage(path, bytes).map(|tmp| (path, tmp)))
            .collect::<Result<Vec<_>>>()?;
        for (path, tmp) in staged {
            tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        }
        Ok(())
    }
}
