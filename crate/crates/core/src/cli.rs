//! Command-line front end: argument parsing, JSONL/CSV persistence and run
//! manifests. `run` returns the process exit code.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::act::{build_reports, scatter_rows, ActError, BaselineFile, ModeMeasurement};
use crate::config::{resolve_config, ConfigError, RunConfig};
use crate::dapo::{run_two_phase, DapoError, StepRecord};
use crate::reward::{group_length_range, ModeRewardConfig, RewardError, RewardScorer};
use crate::seed::SeedStream;
use crate::sft::{build_dataset, CopyFinalAnswer, SftError, SourceTrace};
use crate::toy::{ToyEnvironment, ToyError};
use crate::trace::{parse_trace, Mode, TraceError, TraceRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "effort-dial", version, about = "Budget-mode reasoning data, rewards, toy RL and ACT scoring")]
pub struct Cli {
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the balanced per-mode SFT dataset from full reasoning traces.
    Construct {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        answers: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        r_med: Option<f64>,
        #[arg(long)]
        r_low: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score traces with the composite mode-aware reward.
    Score {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        answers: PathBuf,
        #[arg(long, value_enum, default_value_t = GroupBy::QueryId)]
        group_by: GroupBy,
        /// Keyword list file, one per line, `#` comments.
        #[arg(long)]
        keywords: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run two-phase training on the toy environment.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute ACT scores from per-mode measurements.
    Report {
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scatter-plot CSV; defaults to the report path with a .csv extension.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GroupBy {
    /// Traces sharing a `query_id` (or `id` when absent) form a group.
    #[value(alias = "query_id")]
    QueryId,
    /// Every trace is its own group.
    None,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}:{line}: {message}")]
    InvalidInput { path: PathBuf, line: usize, message: String },
    #[error("no reference answer for {0:?}")]
    MissingReference(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Sft(#[from] SftError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Dapo(#[from] DapoError),
    #[error(transparent)]
    Toy(#[from] ToyError),
    #[error(transparent)]
    Act(#[from] ActError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Config(ConfigError::Io { .. }) => "ConfigIo",
            CliError::Config(ConfigError::Parse(_)) => "ParseError",
            CliError::Config(ConfigError::Validation { .. }) => "ValidationError",
            CliError::InvalidInput { .. } => "InvalidInput",
            CliError::MissingReference(_) => "MissingReference",
            CliError::InvalidArgument(_) => "InvalidArgument",
            CliError::Trace(TraceError::MalformedTrace(_)) => "MalformedTrace",
            CliError::Trace(TraceError::UnknownMode(_)) => "UnknownMode",
            CliError::Sft(e) => match e {
                SftError::EmptyCorpus => "EmptyCorpus",
                SftError::GeneratorFailure(_) => "GeneratorFailure",
                SftError::UnknownToken(_) => "UnknownToken",
                SftError::InvalidConfig(_) => "InvalidConfig",
            },
            CliError::Reward(RewardError::OutOfGroupRange { .. }) => "OutOfGroupRange",
            CliError::Reward(RewardError::InvalidConfig(_)) => "InvalidConfig",
            CliError::Dapo(_) => "TrainingError",
            CliError::Toy(ToyError::RolloutOverflow { .. }) => "RolloutOverflow",
            CliError::Toy(ToyError::InvalidConfig(_)) => "InvalidConfig",
            CliError::Act(e) => match e {
                ActError::InvalidBaseline(_) => "InvalidBaseline",
                ActError::InvalidMeasurement { .. } => "InvalidMeasurement",
                ActError::IncompleteBenchmark { .. } => "IncompleteBenchmark",
                ActError::MissingBaseline(_) => "MissingBaseline",
                ActError::UnitMismatch(_) => "UnitMismatch",
                ActError::RaggedOutcomes { .. } => "RaggedOutcomes",
                ActError::InvalidOutcome { .. } => "InvalidOutcome",
                ActError::NoOutcomes => "NoOutcomes",
            },
            CliError::Io { .. } => "IoError",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(ConfigError::Io { .. }) | CliError::Io { .. } => EXIT_IO,
            CliError::Config(_)
            | CliError::InvalidInput { .. }
            | CliError::MissingReference(_)
            | CliError::InvalidArgument(_)
            | CliError::Trace(_)
            | CliError::Act(_) => EXIT_VALIDATION,
            CliError::Sft(SftError::InvalidConfig(_))
            | CliError::Reward(RewardError::InvalidConfig(_))
            | CliError::Toy(ToyError::InvalidConfig(_))
            | CliError::Dapo(DapoError::InvalidConfig(_)) => EXIT_VALIDATION,
            CliError::Sft(_) | CliError::Reward(_) | CliError::Dapo(_) | CliError::Toy(_) => EXIT_RUNTIME,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": {
                "code": self.code(),
                "exit_code": self.exit_code(),
                "message": self.to_string(),
            }
        })
        .to_string()
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::InvalidInput {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("record serializes to JSON");
        buf.push(b'\n');
    }
    buf
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config_path: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub inputs: Vec<FileEntry>,
    pub outputs: Vec<FileEntry>,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

/// Collects the outputs of one subcommand and writes them with a manifest.
struct Run {
    subcommand: &'static str,
    config: RunConfig,
    config_path: Option<PathBuf>,
    started: u128,
    inputs: Vec<FileEntry>,
    outputs: Vec<(PathBuf, Vec<u8>)>,
}

impl Run {
    fn new(subcommand: &'static str, config: RunConfig, config_path: Option<PathBuf>) -> Self {
        Self {
            subcommand,
            config,
            config_path,
            started: now_ms(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, path: &Path) -> Result<(), CliError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        self.inputs.push(FileEntry {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn output(&mut self, path: PathBuf, bytes: Vec<u8>) {
        self.outputs.push((path, bytes));
    }

    /// Writes every output, then the manifest declaring them.
    fn finish(self, manifest_path: &Path) -> Result<RunManifest, CliError> {
        let mut outputs = Vec::new();
        for (path, bytes) in &self.outputs {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            fs::write(path, bytes).map_err(io_err(path))?;
            outputs.push(FileEntry {
                path: path.display().to_string(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
            });
        }
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: self.subcommand.to_string(),
            config_path: self.config_path.map(|p| p.display().to_string()),
            config_hash: self.config.hash(),
            seed: self.config.seed,
            inputs: self.inputs,
            outputs,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
        };
        let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        json.push(b'\n');
        if let Some(parent) = manifest_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(manifest_path, json).map_err(io_err(manifest_path))?;
        Ok(manifest)
    }
}

fn pretty_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut json = serde_json::to_vec_pretty(value).expect("value serializes to JSON");
    json.push(b'\n');
    json
}

/// `<stem>.manifest.json` next to a single-file output.
fn sibling_manifest(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.manifest.json"))
}

fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::InvalidArgument("--out is required (or set output_dir in the config)".into()))
}

#[derive(Debug, Clone, Deserialize)]
struct ReferenceRecord {
    id: String,
    answer: String,
}

fn load_references(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    Ok(read_jsonl::<ReferenceRecord>(path)?.into_iter().map(|r| (r.id, r.answer)).collect())
}

fn construct(
    input: &Path,
    answers: &Path,
    out: Option<PathBuf>,
    r_med: Option<f64>,
    r_low: Option<f64>,
    seed: Option<u64>,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let (mut cfg, config_path) = resolve_config(config)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    if let Some(r) = r_med {
        cfg.truncation.r_med = r;
    }
    if let Some(r) = r_low {
        cfg.truncation.r_low = r;
    }
    cfg.validate()?;
    let out = output_dir(out, &cfg)?;
    let mut run = Run::new("construct", cfg.clone(), config_path);
    run.input(input)?;
    run.input(answers)?;

    let format = cfg.trace.format();
    let tok = cfg.trace.tokenizer();
    let references = load_references(answers)?;
    let records: Vec<TraceRecord> = read_jsonl(input)?;
    let sources = records
        .into_iter()
        .map(|r| {
            let trace = parse_trace(&r.raw_text, r.mode, &format, &tok)?;
            let reference = references
                .get(&r.id)
                .cloned()
                .ok_or_else(|| CliError::MissingReference(r.id.clone()))?;
            Ok(SourceTrace {
                query: r.query.unwrap_or_default(),
                id: r.id,
                trace,
                reference,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let (samples, manifest) = build_dataset(
        &sources,
        &cfg.dataset(),
        &CopyFinalAnswer,
        &format,
        &tok,
        &SeedStream::new(cfg.seed),
    )?;
    for mode in [Mode::High, Mode::Medium, Mode::Low] {
        let records: Vec<_> = samples.iter().filter(|s| s.mode == mode).map(|s| s.record(&format)).collect();
        run.output(out.join(format!("sft_{mode}.jsonl")), to_jsonl(&records));
    }
    run.output(out.join("dataset_manifest.json"), pretty_json(&manifest));
    run.finish(&out.join("manifest.json"))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub id: String,
    pub query_id: String,
    pub mode: Mode,
    pub total_tokens: usize,
    pub task: f64,
    pub lambda: f64,
    pub length: f64,
    pub leak: f64,
    pub total: f64,
}

fn score(
    traces: &Path,
    answers: &Path,
    group_by: GroupBy,
    keywords: Option<&Path>,
    out: &Path,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let (mut cfg, config_path) = resolve_config(config)?;
    let mut run = Run::new("score", cfg.clone(), config_path);
    if let Some(path) = keywords {
        cfg.reward.leak_keywords = ModeRewardConfig::load_keywords(path).map_err(io_err(path))?;
        cfg.validate()?;
        run.config = cfg.clone();
        run.input(path)?;
    }
    run.input(traces)?;
    run.input(answers)?;
    let format = cfg.trace.format();
    let tok = cfg.trace.tokenizer();
    let references = load_references(answers)?;
    let records: Vec<TraceRecord> = read_jsonl(traces)?;
    let parsed = records
        .iter()
        .map(|r| parse_trace(&r.raw_text, r.mode, &format, &tok))
        .collect::<Result<Vec<_>, _>>()?;
    let group_key = |r: &TraceRecord| match group_by {
        GroupBy::QueryId => r.query_id.clone().unwrap_or_else(|| r.id.clone()),
        GroupBy::None => r.id.clone(),
    };
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(group_key(r)).or_default().push(i);
    }
    let scorer = RewardScorer::new(&cfg.reward);
    let mut scored: Vec<Option<ScoreRecord>> = vec![None; records.len()];
    for members in groups.values() {
        let range = match group_by {
            GroupBy::QueryId => group_length_range(members.iter().map(|&i| parsed[i].total_tokens)),
            GroupBy::None => (parsed[members[0]].total_tokens, parsed[members[0]].total_tokens),
        };
        for &i in members {
            let r = &records[i];
            let query_id = r.query_id.clone().unwrap_or_else(|| r.id.clone());
            let reference = references
                .get(&query_id)
                .or_else(|| references.get(&r.id))
                .ok_or_else(|| CliError::MissingReference(query_id.clone()))?;
            let b = scorer.score(&parsed[i], reference, range)?;
            scored[i] = Some(ScoreRecord {
                id: r.id.clone(),
                query_id,
                mode: r.mode,
                total_tokens: parsed[i].total_tokens,
                task: b.task,
                lambda: b.lambda,
                length: b.length,
                leak: b.leak,
                total: b.total,
            });
        }
    }
    let scored: Vec<ScoreRecord> = scored.into_iter().flatten().collect();
    run.output(out.to_path_buf(), to_jsonl(&scored));
    run.finish(&sibling_manifest(out))?;
    Ok(())
}

/// One CSV row per logged step, flattened for plotting.
#[derive(Debug, Serialize)]
struct SummaryRow {
    step: usize,
    phase: u8,
    objective: f64,
    mean_reward: f64,
    groups_kept: usize,
    low_accuracy: f64,
    low_thinking: f64,
    low_answer: f64,
    low_total: f64,
    medium_accuracy: f64,
    medium_thinking: f64,
    medium_answer: f64,
    medium_total: f64,
    high_accuracy: f64,
    high_thinking: f64,
    high_answer: f64,
    high_total: f64,
}

impl From<&StepRecord> for SummaryRow {
    fn from(r: &StepRecord) -> Self {
        let (l, m, h) = (&r.eval.low, &r.eval.medium, &r.eval.high);
        Self {
            step: r.step,
            phase: r.phase,
            objective: r.objective,
            mean_reward: r.mean_reward,
            groups_kept: r.groups_kept,
            low_accuracy: l.accuracy,
            low_thinking: l.thinking_tokens,
            low_answer: l.answer_tokens,
            low_total: l.total_tokens,
            medium_accuracy: m.accuracy,
            medium_thinking: m.thinking_tokens,
            medium_answer: m.answer_tokens,
            medium_total: m.total_tokens,
            high_accuracy: h.accuracy,
            high_thinking: h.thinking_tokens,
            high_answer: h.answer_tokens,
            high_total: h.total_tokens,
        }
    }
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).expect("row serializes to CSV");
    }
    w.into_inner().expect("in-memory CSV writer flushes")
}

fn train_toy(config: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<(), CliError> {
    let (mut cfg, config_path) = resolve_config(config)?;
    if let Some(s) = seed {
        cfg.set_seed(s);
    }
    let out = output_dir(out, &cfg)?;
    let mut run = Run::new("train-toy", cfg.clone(), config_path);
    let env = ToyEnvironment::new(&cfg.environment)?;
    let policy = cfg.policy.build().map_err(|e| CliError::InvalidArgument(e.to_string()))?;
    let log = run_two_phase(&env, &policy, &cfg.dapo, &cfg.reward)?;
    run.output(out.join("training_log.jsonl"), to_jsonl(&log.records));
    run.output(out.join("summary.csv"), to_csv(log.records.iter().map(SummaryRow::from)));
    run.output(
        out.join("training_meta.json"),
        pretty_json(&serde_json::json!({
            "metadata": log.metadata,
            "warmup_peak_high_accuracy": log.warmup_peak_accuracy(Mode::High),
            "final_parameters": log.final_parameters,
        })),
    );
    run.output(out.join("config.toml"), cfg.to_toml().into_bytes());
    run.finish(&out.join("manifest.json"))?;
    Ok(())
}

fn report(
    measurements: &Path,
    baseline: &Path,
    out: &Path,
    csv_path: Option<PathBuf>,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let (cfg, config_path) = resolve_config(config)?;
    let mut run = Run::new("report", cfg.clone(), config_path);
    run.input(measurements)?;
    run.input(baseline)?;
    let ms: Vec<ModeMeasurement> = read_jsonl(measurements)?;
    let text = fs::read_to_string(baseline).map_err(io_err(baseline))?;
    let baselines: BaselineFile = serde_json::from_str(&text).map_err(|e| CliError::InvalidInput {
        path: baseline.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let reports = build_reports(&ms, &baselines.into_vec(), cfg.metrics.accuracy_unit)?;
    let display: BTreeMap<&str, [String; 4]> = reports.iter().map(|r| (r.benchmark.as_str(), r.display_row())).collect();
    run.output(
        out.to_path_buf(),
        pretty_json(&serde_json::json!({ "reports": reports, "display": display })),
    );
    run.output(csv_path.unwrap_or_else(|| out.with_extension("csv")), to_csv(scatter_rows(&reports)));
    run.finish(&sibling_manifest(out))?;
    Ok(())
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::InvalidArgument("--threads must be positive".into()));
        }
        // a second call in the same process keeps the first pool, which is fine
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match cli.command {
        Command::Construct {
            input,
            answers,
            out,
            r_med,
            r_low,
            seed,
            config,
        } => construct(&input, &answers, out, r_med, r_low, seed, config.as_deref()),
        Command::Score {
            traces,
            answers,
            group_by,
            keywords,
            out,
            config,
        } => score(&traces, &answers, group_by, keywords.as_deref(), &out, config.as_deref()),
        Command::TrainToy { config, seed, out } => train_toy(config.as_deref(), seed, out),
        Command::Report {
            measurements,
            baseline,
            out,
            csv,
            config,
        } => report(&measurements, &baseline, &out, csv, config.as_deref()),
    }
}

/// Parses `args`, runs the subcommand and returns the exit code. Errors go
/// to `stderr` as one JSON object.
pub fn run<I, T>(args: I, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return EXIT_OK;
        }
        Err(e) => {
            let _ = write!(stderr, "{e}");
            return EXIT_VALIDATION;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(stderr, "{}", e.to_json());
            e.exit_code()
        }
    }
}
