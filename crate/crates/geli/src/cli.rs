use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{error::ErrorKind, CommandFactory, Parser, Subcommand, ValueEnum};
use geli_core::baselines::{
    constant_baseline, ircr_decompose, rrd_decompose, rudder_decompose, train_return_predictor, train_rrd, uniform_decompose,
    ConstantKind, ReturnPredictorConfig, RewardRange, RrdConfig,
};
use geli_core::corpus::{Corpus, Split, Trajectory};
use geli_core::decompose::{
    decompose, ChatOracle, ChatRequest, DecomposeOptions, Method, OracleConfig, OracleError, PromptVariant, RewardAssignment,
};
use geli_core::descriptors::{affect_index, describe_trajectory, undescribed, BinEdges, DescribedTurn};
use geli_core::metrics::{evaluate, AssignmentReplay, MetricsReport};
use geli_core::reward_model::{self, Featurizer, Optimizer, RewardModel, TrainConfig};
use geli_core::rl::{run_alignment, RewardModelScorer, RlConfig};
use geli_core::synthetic::{generate, HiddenTruth, MockOracle, RewardRule, SyntheticSpec, DEFAULT_VOCAB};

use crate::config;
use crate::error::{Error, Result};
use crate::io::{self, ModelFile, Outputs, Transcript};
use crate::oracle::HttpOracle;

/// Endpoint prefix selecting the built-in mock oracle, followed by the path
/// of a truth JSONL file.
pub const MOCK_SCHEME: &str = "mock:";

#[derive(Debug, Parser)]
#[command(name = "geli", version, about = "Per-turn reward decomposition for long-form dialogue", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic train/test corpus with hidden per-turn rewards.
    Synth(SynthArgs),
    /// Validate a transcript file (and feature file) and write it back normalized.
    Ingest(IngestArgs),
    /// Attach listener-feature descriptors to every turn.
    Describe(DescribeArgs),
    /// Assign per-turn rewards with an oracle or a baseline method.
    Decompose(DecomposeArgs),
    /// Distill assignments into a reward model.
    TrainReward(TrainRewardArgs),
    /// Score reward models and assignments: global loss and local difference.
    Eval(EvalArgs),
    /// Agreement between the first two samples of each trajectory.
    Consistency(ConsistencyArgs),
    /// Optimize a toy policy against a learned reward model.
    Rl(RlArgs),
}

#[derive(Debug, clap::Args)]
pub struct ConfigArg {
    /// INI config; flags on the command line take precedence.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RuleArg {
    Planted,
    Linear,
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Training trajectories.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Test trajectories.
    #[arg(long, default_value_t = 100)]
    pub test_n: usize,
    /// Fewest turns per trajectory.
    #[arg(long, default_value_t = 10)]
    pub turns_min: usize,
    /// Most turns per trajectory.
    #[arg(long, default_value_t = 30)]
    pub turns_max: usize,
    /// Hidden reward rule.
    #[arg(long, value_enum, default_value_t = RuleArg::Planted)]
    pub rule: RuleArg,
    /// Listener happiness boost on high-reward turns.
    #[arg(long, default_value_t = 0.2)]
    pub affect_gap: f64,
    /// Standard deviation of noise on the session score.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Share of agent turns that are salient (planted rule).
    #[arg(long, default_value_t = 0.2)]
    pub salient_fraction: f64,
    /// Hash dimension of the hidden linear rule.
    #[arg(long, default_value_t = 64)]
    pub hash_dim: usize,
    /// Seed; the test split uses seed + 1.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, clap::Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Transcript JSONL.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Feature CSV.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Output directory for corpus.jsonl (and features.csv).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Transcript JSONL.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Feature CSV.
    #[arg(long)]
    pub features: PathBuf,
    /// Bin edges to reuse (for example from the training split) instead of
    /// computing them from this corpus.
    #[arg(long)]
    pub bins: Option<PathBuf>,
    /// Output directory for described.jsonl and bins.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Llm,
    MmLlm,
    Uniform,
    Ircr,
    Rudder,
    Rrd,
    Mean,
    Mode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Text,
    Mm,
}

#[derive(Debug, clap::Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Transcript JSONL, optionally with descriptors.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Feature CSV used to build descriptors when the corpus has none.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Decomposition method.
    #[arg(long, value_enum)]
    pub method: MethodArg,
    /// Prompt variant for `llm`; `mm-llm` always uses `mm`.
    #[arg(long, value_enum, default_value_t = VariantArg::Text)]
    pub variant: VariantArg,
    /// Oracle samples per trajectory; sample `s` uses seed + s.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Shift oracle rewards so they sum to the session score.
    #[arg(long)]
    pub project: bool,
    /// Seed for every random choice.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Concurrent trajectories.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Chat-completion URL, or `mock:<truth.jsonl>`.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Oracle model name sent with each request.
    #[arg(long, default_value = "o3-mini")]
    pub model_id: String,
    /// Oracle sampling temperature.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Retries after transport errors and 5xx replies.
    #[arg(long, default_value_t = 3)]
    pub max_retries: usize,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120.0)]
    pub timeout_s: f64,
    /// First retry delay in milliseconds.
    #[arg(long, default_value_t = 1000)]
    pub backoff_ms: u64,
    /// Longest transcript sent to the oracle.
    #[arg(long, default_value_t = 400)]
    pub max_prompt_turns: usize,
    /// Per-turn noise added by the mock oracle.
    #[arg(long, default_value_t = 0.0)]
    pub mock_noise: f64,
    /// Corpus defining the IRCR range and the Mean/Mode constants
    /// (defaults to --corpus).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// RRD subsample size.
    #[arg(long, default_value_t = 32)]
    pub rrd_k: usize,
    /// RRD gradient steps.
    #[arg(long, default_value_t = 2000)]
    pub rrd_iterations: usize,
    /// Training epochs of the RUDDER return predictor.
    #[arg(long, default_value_t = 60)]
    pub rudder_epochs: usize,
    /// Output directory for assignments.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegressorArg {
    Affine,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Debug, clap::Args)]
pub struct TrainRewardArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Transcript JSONL the assignments refer to.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Assignment JSONL; only the first assignment per trajectory is used.
    #[arg(long)]
    pub assignments: PathBuf,
    /// Reward model family.
    #[arg(long, value_enum, default_value_t = RegressorArg::Affine)]
    pub regressor: RegressorArg,
    /// MLP hidden units.
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Passes over the training pairs.
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    /// Mini-batch size.
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    /// Gradient update rule.
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    pub optimizer: OptimizerArg,
    /// Feature hash dimension.
    #[arg(long, default_value_t = 16384)]
    pub hash_dim: usize,
    /// Preceding turns included in the featurized state.
    #[arg(long, default_value_t = 4)]
    pub context_window: usize,
    /// Longest token n-gram hashed.
    #[arg(long, default_value_t = 2)]
    pub ngram_max: usize,
    /// Seed for every random choice.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for model.json and loss.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Transcript JSONL of the evaluation split.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Feature CSV of the evaluation split (needed for affect labels).
    #[arg(long)]
    pub features: PathBuf,
    /// Reward model JSON; repeatable.
    #[arg(long, action = clap::ArgAction::Append)]
    pub model: Vec<PathBuf>,
    /// Assignment JSONL replayed as a predictor; repeatable.
    #[arg(long, action = clap::ArgAction::Append)]
    pub assignments: Vec<PathBuf>,
    /// Split label written into the report.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Output directory for report.json and report.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, clap::Args)]
pub struct ConsistencyArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Transcript JSONL.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Assignment JSONL with at least two samples per trajectory.
    #[arg(long)]
    pub assignments: PathBuf,
    /// Use only the first N paired trajectories.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Optional output directory for consistency.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct RlArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// Reward model JSON.
    #[arg(long)]
    pub model: PathBuf,
    /// Policy updates.
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    /// KL coefficient.
    #[arg(long, default_value_t = 0.05)]
    pub gamma: f64,
    /// Probability-ratio clip range.
    #[arg(long, default_value_t = 0.2)]
    pub clip_range: f64,
    /// Learning rate.
    #[arg(long, default_value_t = 1.0)]
    pub lr: f64,
    /// Rollouts per update.
    #[arg(long, default_value_t = 24)]
    pub batch_size: usize,
    /// Agent actions per episode.
    #[arg(long, default_value_t = 6)]
    pub episode_length: usize,
    /// Policy context length in tokens.
    #[arg(long, default_value_t = 1)]
    pub context_order: usize,
    /// Disable advantage standardization.
    #[arg(long)]
    pub no_score_norm: bool,
    /// Comma-separated action words (defaults to the first 8 synthetic words).
    #[arg(long)]
    pub vocab: Option<String>,
    /// Seed for every random choice.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for curves.csv and report.json.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run(args: Vec<OsString>) -> i32 {
    let command = Cli::command();
    let args = match config::expand_args(args, &command) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("{}", e.report_line());
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_owned();
                    eprintln!("{}", Error::Usage(first).report_line());
                    1
                }
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.report_line());
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(&a),
        Command::Ingest(a) => cmd_ingest(&a),
        Command::Describe(a) => cmd_describe(&a),
        Command::Decompose(a) => cmd_decompose(&a),
        Command::TrainReward(a) => cmd_train_reward(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Consistency(a) => cmd_consistency(&a),
        Command::Rl(a) => cmd_rl(&a),
    }
}

fn core_at(path: &Path) -> impl FnOnce(geli_core::Error) -> Error + '_ {
    move |source| Error::File {
        path: path.into(),
        source,
    }
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let rule = match a.rule {
        RuleArg::Planted => RewardRule::PlantedSalientTurns,
        RuleArg::Linear => RewardRule::LinearInFeatures,
    };
    let base = SyntheticSpec {
        turns_min: a.turns_min,
        turns_max: a.turns_max,
        true_reward_rule: rule,
        affect_gap: a.affect_gap,
        noise_sigma: a.noise,
        salient_fraction: a.salient_fraction,
        featurizer: Featurizer {
            hash_dim: a.hash_dim,
            ..Featurizer::default()
        },
        ..SyntheticSpec::default()
    };
    let train_spec = SyntheticSpec {
        n_trajectories: a.n,
        seed: a.seed,
        id_prefix: "train".into(),
        split: Split::RewardTrain,
        ..base.clone()
    };
    let test_spec = SyntheticSpec {
        n_trajectories: a.test_n,
        seed: a.seed.wrapping_add(1),
        id_prefix: "test".into(),
        split: Split::Test,
        ..base
    };
    let (train, mut truth) = generate(&train_spec)?;
    let (test, test_truth) = generate(&test_spec)?;
    truth.merge(test_truth);
    let mut out = Outputs::default();
    out.add(a.out.join("train.jsonl"), io::transcripts_jsonl(&train.trajectories, None));
    out.add(a.out.join("train_features.csv"), io::frames_csv(train.frames()));
    out.add(a.out.join("test.jsonl"), io::transcripts_jsonl(&test.trajectories, None));
    out.add(a.out.join("test_features.csv"), io::frames_csv(test.frames()));
    out.add(a.out.join("truth.jsonl"), io::truth_jsonl(&truth));
    out.commit()?;
    println!("synth train={} test={} frames={}", train.len(), test.len(), train.frame_count() + test.frame_count());
    Ok(())
}

pub fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let (corpus, _) = io::load_corpus(&a.corpus, a.features.as_deref(), Split::RewardTrain)?;
    let mut out = Outputs::default();
    out.add(a.out.join("corpus.jsonl"), io::transcripts_jsonl(&corpus.trajectories, None));
    if a.features.is_some() {
        out.add(a.out.join("features.csv"), io::frames_csv(corpus.frames()));
    }
    out.commit()?;
    let turns: usize = corpus.trajectories.iter().map(|t| t.turns.len()).sum();
    println!("ingest trajectories={} turns={} frames={}", corpus.len(), turns, corpus.frame_count());
    Ok(())
}

pub fn cmd_describe(a: &DescribeArgs) -> Result<()> {
    let (corpus, _) = io::load_corpus(&a.corpus, Some(&a.features), Split::RewardTrain)?;
    let edges = match &a.bins {
        Some(p) => io::read_bins(p)?,
        None => BinEdges::from_corpus(&corpus),
    };
    let described: BTreeMap<String, Vec<DescribedTurn>> = corpus
        .trajectories
        .iter()
        .map(|t| (t.id.clone(), describe_trajectory(t, corpus.frames_for(&t.id), &edges)))
        .collect();
    let mut out = Outputs::default();
    out.add(a.out.join("described.jsonl"), io::transcripts_jsonl(&corpus.trajectories, Some(&described)));
    out.add(a.out.join("bins.json"), io::bins_json(&edges));
    out.commit()?;
    println!("describe trajectories={}", corpus.len());
    Ok(())
}

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = std::iter::repeat_with(|| None).take(items.len()).collect();
    let done = std::sync::Mutex::new(Vec::with_capacity(items.len()));
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                done.lock().expect("worker panicked").push((i, r));
            });
        }
    });
    for (i, r) in done.into_inner().expect("worker panicked") {
        slots[i] = Some(r);
    }
    slots.into_iter().map(|r| r.expect("every item processed")).collect()
}

#[derive(Clone)]
enum Backend<'a> {
    Mock(MockOracle<'a>),
    Http(HttpOracle),
}

impl ChatOracle for Backend<'_> {
    fn complete(&mut self, request: &ChatRequest) -> Result<String, OracleError> {
        match self {
            Backend::Mock(m) => m.complete(request),
            Backend::Http(h) => h.complete(request),
        }
    }

    fn backoff(&mut self, delay: Duration) {
        match self {
            Backend::Mock(m) => m.backoff(delay),
            Backend::Http(h) => h.backoff(delay),
        }
    }
}

fn described_for(corpus: &Corpus, records: &[Transcript], features: Option<&Path>) -> Result<Vec<Vec<DescribedTurn>>> {
    if records.iter().any(Transcript::has_descriptors) {
        return Ok(records.iter().map(Transcript::described).collect());
    }
    if features.is_none() {
        return Err(Error::Usage(
            "the multimodal variant needs descriptors in --corpus or a --features file".into(),
        ));
    }
    let edges = BinEdges::from_corpus(corpus);
    Ok(corpus
        .trajectories
        .iter()
        .map(|t| describe_trajectory(t, corpus.frames_for(&t.id), &edges))
        .collect())
}

fn oracle_config(a: &DecomposeArgs, endpoint: &str) -> Result<OracleConfig> {
    if !(a.timeout_s > 0.0) || !a.timeout_s.is_finite() {
        return Err(Error::Core(geli_core::Error::Validation {
            field: "timeout_s".into(),
            message: "must be positive".into(),
        }));
    }
    let cfg = OracleConfig {
        endpoint_url: endpoint.into(),
        model_id: a.model_id.clone(),
        temperature: a.temperature,
        max_retries: a.max_retries,
        timeout: Duration::from_secs_f64(a.timeout_s),
        max_prompt_turns: a.max_prompt_turns,
        backoff_base: Duration::from_millis(a.backoff_ms),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn oracle_assignments(a: &DecomposeArgs, corpus: &Corpus, records: &[Transcript]) -> Result<Vec<RewardAssignment>> {
    let endpoint = a
        .endpoint
        .as_deref()
        .ok_or_else(|| Error::Usage("--endpoint is required for oracle methods".into()))?;
    let mut cfg = oracle_config(a, endpoint)?;
    if endpoint.starts_with(MOCK_SCHEME) {
        cfg.model_id = "mock".into();
    }
    let truth: HiddenTruth;
    let backend = match endpoint.strip_prefix(MOCK_SCHEME) {
        Some(path) => {
            truth = io::read_truth(Path::new(path))?;
            Backend::Mock(MockOracle::new(&truth, a.mock_noise, a.seed))
        }
        None => Backend::Http(HttpOracle::from_env(&cfg)?),
    };
    let variant = match (a.method, a.variant) {
        (MethodArg::MmLlm, _) | (_, VariantArg::Mm) => PromptVariant::Multimodal,
        _ => PromptVariant::TextOnly,
    };
    let described = match variant {
        PromptVariant::Multimodal => described_for(corpus, records, a.features.as_deref())?,
        PromptVariant::TextOnly => corpus.trajectories.iter().map(undescribed).collect(),
    };
    let work: Vec<(usize, &Trajectory, &[DescribedTurn])> = (0..a.samples.max(1))
        .flat_map(|s| {
            corpus
                .trajectories
                .iter()
                .zip(&described)
                .map(move |(t, d)| (s, t, d.as_slice()))
        })
        .collect();
    parallel_map(&work, a.jobs, |&(s, t, d)| {
        let opts = DecomposeOptions {
            variant,
            project: a.project,
            seed: a.seed.wrapping_add(s as u64),
        };
        let mut oracle = backend.clone();
        decompose(t, d, opts, &cfg, &mut oracle)
    })
    .into_iter()
    .collect::<geli_core::Result<Vec<_>>>()
    .map_err(Error::from)
}

pub fn cmd_decompose(a: &DecomposeArgs) -> Result<()> {
    let needs_features = matches!(a.method, MethodArg::MmLlm) || a.variant == VariantArg::Mm;
    let features = if needs_features { a.features.as_deref() } else { None };
    let (corpus, records) = io::load_corpus(&a.corpus, features, Split::RewardTrain)?;
    let reference = match &a.reference {
        Some(p) => io::load_corpus(p, None, Split::RewardTrain)?.0,
        None => corpus.clone(),
    };
    let mut out = Outputs::default();
    let each = |f: &(dyn Fn(&Trajectory) -> geli_core::Result<RewardAssignment> + Sync)| -> Result<Vec<RewardAssignment>> {
        let per = parallel_map(&corpus.trajectories, a.jobs, f);
        let mut all = Vec::new();
        for _ in 0..a.samples.max(1) {
            for r in &per {
                all.push(r.clone()?);
            }
        }
        Ok(all)
    };
    let assignments = match a.method {
        MethodArg::Llm | MethodArg::MmLlm => oracle_assignments(a, &corpus, &records)?,
        MethodArg::Uniform => each(&uniform_decompose)?,
        MethodArg::Ircr => {
            let range = RewardRange::from_corpus(&reference)?;
            each(&|t| ircr_decompose(t, range))?
        }
        MethodArg::Mean | MethodArg::Mode => {
            let kind = if a.method == MethodArg::Mean { ConstantKind::Mean } else { ConstantKind::Mode };
            let c = constant_baseline(&reference, kind)?;
            each(&|t| c.assign(t))?
        }
        MethodArg::Rudder => {
            let cfg = ReturnPredictorConfig {
                epochs: a.rudder_epochs,
                seed: a.seed,
                ..ReturnPredictorConfig::default()
            };
            let g = train_return_predictor(&corpus, &cfg)?;
            out.add(a.out.join("return_predictor.json"), io::return_predictor_json(&g));
            each(&|t| rudder_decompose(t, &g))?
        }
        MethodArg::Rrd => {
            let cfg = RrdConfig {
                k: a.rrd_k,
                iterations: a.rrd_iterations,
                seed: a.seed,
                ..RrdConfig::default()
            };
            let trained = train_rrd(&corpus, &RewardModel::affine(Featurizer::default()), &cfg)?;
            out.add(a.out.join("rrd_model.json"), io::model_json(&ModelFile::new(&trained.model, Method::Rrd)));
            each(&|t| rrd_decompose(t, &trained.model))?
        }
    };
    out.add(a.out.join("assignments.jsonl"), io::assignments_jsonl(&assignments));
    out.commit()?;
    println!("decompose method={} assignments={}", assignments.first().map_or("-", |x| x.method.as_str()), assignments.len());
    Ok(())
}

pub fn cmd_train_reward(a: &TrainRewardArgs) -> Result<()> {
    let (corpus, _) = io::load_corpus(&a.corpus, None, Split::RewardTrain)?;
    let all = io::read_assignments(&a.assignments)?;
    let mut seen = std::collections::BTreeSet::new();
    let assignments: Vec<RewardAssignment> = all.into_iter().filter(|x| seen.insert(x.trajectory_id.clone())).collect();
    let method = assignments.first().map(|x| x.method).ok_or(Error::Core(geli_core::Error::EmptyTrainingSet))?;
    let featurizer = Featurizer {
        context_window: a.context_window,
        hash_dim: a.hash_dim,
        n_gram_max: a.ngram_max,
        ..Featurizer::default()
    };
    featurizer.validate()?;
    let model = match a.regressor {
        RegressorArg::Affine => RewardModel::affine(featurizer),
        RegressorArg::Mlp => RewardModel::mlp(featurizer, a.hidden, a.seed),
    };
    let cfg = TrainConfig {
        learning_rate: a.lr,
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        optimizer: match a.optimizer {
            OptimizerArg::Adam => Optimizer::Adam,
            OptimizerArg::Sgd => Optimizer::Sgd,
        },
    };
    let trained = reward_model::train(&model, &corpus, &assignments, &cfg).map_err(core_at(&a.assignments))?;
    let mut out = Outputs::default();
    out.add(a.out.join("model.json"), io::model_json(&ModelFile::new(&trained.model, method)));
    out.add(a.out.join("loss.csv"), io::loss_csv(&trained.loss_curve));
    out.commit()?;
    println!(
        "train-reward method={} examples_from={} final_mse={}",
        method,
        assignments.len(),
        trained.loss_curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Pairs the first two assignments of each trajectory, in file order.
pub fn first_pairs(assignments: &[RewardAssignment]) -> Vec<(RewardAssignment, RewardAssignment)> {
    let mut by_id: BTreeMap<&str, Vec<&RewardAssignment>> = BTreeMap::new();
    let mut order = Vec::new();
    for x in assignments {
        let slot = by_id.entry(&x.trajectory_id).or_default();
        if slot.is_empty() {
            order.push(x.trajectory_id.as_str());
        }
        slot.push(x);
    }
    order
        .into_iter()
        .filter_map(|id| match by_id[id].as_slice() {
            [a, b, ..] => Some(((*a).clone(), (*b).clone())),
            _ => None,
        })
        .collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if a.model.is_empty() && a.assignments.is_empty() {
        return Err(Error::Usage("give at least one --model or --assignments".into()));
    }
    let (corpus, _) = io::load_corpus(&a.corpus, Some(&a.features), Split::Test)?;
    let affect = affect_index(&corpus);
    let mut reports: Vec<MetricsReport> = Vec::new();
    for path in &a.model {
        let file = io::read_model(path)?;
        let model = file.model();
        let r = evaluate(file.source_method.as_str(), &model, &corpus.trajectories, &affect, None, &a.split)
            .map_err(core_at(path))?;
        reports.push(r);
    }
    for path in &a.assignments {
        let all = io::read_assignments(path)?;
        let name = all.first().map_or("EMPTY", |x| x.method.as_str());
        let pairs = first_pairs(&all);
        let replay = AssignmentReplay::new(&all);
        let pairs = (!pairs.is_empty()).then_some(pairs.as_slice());
        let r = evaluate(&format!("{name}/replay"), &replay, &corpus.trajectories, &affect, pairs, &a.split)
            .map_err(core_at(path))?;
        reports.push(r);
    }
    let csv = io::report_csv(&reports);
    let mut out = Outputs::default();
    out.add(a.out.join("report.json"), io::report_json(&reports));
    out.add(a.out.join("report.csv"), csv.clone());
    out.commit()?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

pub fn cmd_consistency(a: &ConsistencyArgs) -> Result<()> {
    let (corpus, _) = io::load_corpus(&a.corpus, None, Split::RewardTrain)?;
    let all = io::read_assignments(&a.assignments)?;
    let mut pairs = first_pairs(&all);
    if let Some(limit) = a.limit {
        pairs.truncate(limit);
    }
    if pairs.is_empty() {
        return Err(Error::Usage("no trajectory has two samples; run decompose with --samples 2".into()));
    }
    let summary = geli_core::metrics::pair_consistency(&corpus.trajectories, &pairs)
        .map_err(core_at(&a.assignments))?
        .expect("pairs are non-empty");
    println!("consistency {:.4}", summary.mean);
    println!("{} over {} conversations", summary, summary.conversations);
    if let Some(dir) = &a.out {
        let mut out = Outputs::default();
        out.add(dir.join("consistency.json"), io::json_bytes(&summary));
        out.commit()?;
    }
    Ok(())
}

pub fn cmd_rl(a: &RlArgs) -> Result<()> {
    let file = io::read_model(&a.model)?;
    let model = file.model();
    let vocab: Vec<String> = match &a.vocab {
        Some(v) => v.split(',').map(|w| w.trim().to_owned()).filter(|w| !w.is_empty()).collect(),
        None => DEFAULT_VOCAB[..8].iter().map(|w| w.to_string()).collect(),
    };
    let cfg = RlConfig {
        kl_coefficient: a.gamma,
        clip_range: a.clip_range,
        learning_rate: a.lr,
        steps: a.steps,
        episode_length: a.episode_length,
        batch_size: a.batch_size,
        seed: a.seed,
        use_score_norm: !a.no_score_norm,
        vocab_size: vocab.len(),
        context_order: a.context_order,
        ppo_epochs: 1,
    };
    let scorer = RewardModelScorer { model: &model, vocab };
    let report = run_alignment(&scorer, &cfg)?;
    let mut out = Outputs::default();
    out.add(a.out.join("curves.csv"), io::curves_csv(&report.curve));
    out.add(a.out.join("report.json"), io::json_bytes(&report));
    out.commit()?;
    println!(
        "rl initial_reward={:.4} final_reward={:.4} final_kl={:.4}",
        report.initial_mean_reward, report.final_mean_reward, report.final_kl
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn every_flag_has_help() {
        for sub in Cli::command().get_subcommands() {
            for arg in sub.get_arguments() {
                assert!(arg.get_help().is_some(), "{} --{}", sub.get_name(), arg.get_id());
            }
        }
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u32> = (0..50).collect();
        assert_eq!(parallel_map(&items, 4, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
