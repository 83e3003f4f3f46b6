//! The `kgqa` command line.
//!
//! Settings are layered: flags, then `KGQA_*` environment variables, then the
//! command's section of the TOML file given by `--config`, then defaults.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_system, Question, RunConfig, SystemKind};
use crate::client::{EndpointConfig, SparqlClient};
use crate::curation::{curate_dataset, read_curated, read_raw_records, Split};
use crate::endpoint::{serve, ServerConfig};
use crate::environment::{
    read_episode_log, write_episode_log, Environment, EpisodeConfig, EpisodeRecord, Executor,
};
use crate::eval::{
    discordance, group_by_system, render_table, system_report, McNemarReport, RunResult,
};
use crate::generation::{GenerationClient, GenerationConfig};
use crate::grpo::{export_records, Group, GrpoConfig};
use crate::policy::{DecodingParams, Policy, RemotePolicy, ScriptedPolicy};
use crate::protocol::{serialize_state, word_token_offsets};
use crate::reward::{score, Judge, RemoteJudge, RewardConfig};
use crate::sparql::{load_ntriples, PrefixMap, RdfTerm, TripleStore};
use crate::toy::{generate_world, train_toy, write_curves, ToyTrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FATAL: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "kgqa",
    version,
    about = "Iterative SPARQL agents: environment, training, curation and evaluation"
)]
pub struct Cli {
    /// TOML file with one table per command (e.g. [episode]).
    #[arg(long, global = true, env = "KGQA_CONFIG")]
    pub config: Option<PathBuf>,
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, env = "KGQA_LOG", default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve an N-Triples file over the SPARQL protocol.
    Serve(ServeArgs),
    /// Re-execute gold queries and keep single-answer records.
    Curate(CurateArgs),
    /// Run one episode and print its transcript and reward.
    Episode(EpisodeArgs),
    /// Run a system (b1, b2, b3, agent) over a curated dataset.
    Run(RunArgs),
    /// Train the template policy on the synthetic graph.
    TrainToy(TrainToyArgs),
    /// Compute metrics from episode logs.
    Evaluate(EvaluateArgs),
    /// Convert episode logs to masked training records.
    ExportRecords(ExportArgs),
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExecutorArgs {
    /// N-Triples file for the embedded executor.
    #[arg(long, env = "KGQA_STORE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
    /// SPARQL endpoint URL (used when no --store is given).
    #[arg(long, env = "KGQA_ENDPOINT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[arg(long, env = "KGQA_TIMEOUT_MS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    #[arg(long, env = "KGQA_MAX_RETRIES")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_retries: Option<u32>,
    #[arg(long, env = "KGQA_CACHE_CAPACITY")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_capacity: Option<usize>,
    #[arg(long, env = "KGQA_MAX_PARALLEL")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_parallel: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecutorSettings {
    pub store: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub cache_capacity: usize,
    pub max_parallel: usize,
}

impl Default for ExecutorSettings {
    fn default() -> Self {
        let d = EndpointConfig::default();
        Self {
            store: None,
            endpoint: None,
            timeout_ms: d.timeout.as_millis() as u64,
            max_retries: d.max_retries,
            cache_capacity: d.cache_capacity,
            max_parallel: d.max_parallel,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, env = "KGQA_STORE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub store: Option<PathBuf>,
    /// Address to listen on; port 0 picks a free port.
    #[arg(long, env = "KGQA_BIND")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bind: Option<String>,
    /// Delay added before answering each request.
    #[arg(long, env = "KGQA_LATENCY_MS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
    /// Status codes for the first requests, e.g. 503,503,200.
    #[arg(long, env = "KGQA_FAIL_PATTERN", value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fail_pattern: Option<Vec<u16>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ServeSettings {
    pub store: Option<PathBuf>,
    pub bind: String,
    pub latency_ms: u64,
    pub fail_pattern: Vec<u16>,
}

impl Default for ServeSettings {
    fn default() -> Self {
        Self {
            store: None,
            bind: "127.0.0.1:8890".into(),
            latency_ms: 0,
            fail_pattern: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CurateArgs {
    /// Line-delimited JSON input records.
    #[arg(long, env = "KGQA_INPUT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// Curated output (line-delimited JSON).
    #[arg(long, env = "KGQA_OUTPUT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Summary report path (default: <output>.summary.json).
    #[arg(long, env = "KGQA_SUMMARY")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub summary: Option<PathBuf>,
    /// Split for records that carry none.
    #[arg(long, env = "KGQA_DEFAULT_SPLIT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub default_split: Option<Split>,
    #[arg(long, env = "KGQA_PARALLELISM")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub executor: ExecutorArgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CurateSettings {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub summary: Option<PathBuf>,
    pub default_split: Split,
    pub parallelism: usize,
    #[serde(flatten)]
    pub executor: ExecutorSettings,
}

impl Default for CurateSettings {
    fn default() -> Self {
        Self {
            input: None,
            output: None,
            summary: None,
            default_split: Split::Test,
            parallelism: 8,
            executor: ExecutorSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct PolicyArgs {
    /// scripted or remote.
    #[arg(long, env = "KGQA_POLICY")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    /// JSON array of raw replies for the scripted policy.
    #[arg(long, env = "KGQA_SCRIPT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    /// Text-generation service URL for the remote policy.
    #[arg(long, env = "KGQA_GENERATION_URL")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generation_url: Option<String>,
    #[arg(long, env = "KGQA_TEMPERATURE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[arg(long, env = "KGQA_TOP_P")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_p: Option<f64>,
    #[arg(long, env = "KGQA_MAX_NEW_TOKENS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_new_tokens: Option<u32>,
    /// local or remote.
    #[arg(long, env = "KGQA_JUDGE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge: Option<String>,
    #[arg(long, env = "KGQA_JUDGE_URL")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub judge_url: Option<String>,
    #[arg(long, env = "KGQA_T_MAX")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_max: Option<usize>,
    #[arg(long, env = "KGQA_MAX_ROWS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_rows: Option<usize>,
    #[arg(long, env = "KGQA_MAX_CHARS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_chars: Option<usize>,
    /// Action-only grammar (no think block).
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub no_think: bool,
    #[arg(long, env = "KGQA_SEED")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicySettings {
    pub policy: String,
    pub script: Option<PathBuf>,
    pub generation_url: Option<String>,
    /// Unset means the system's default decoding.
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_new_tokens: u32,
    pub judge: String,
    pub judge_url: Option<String>,
    pub t_max: usize,
    pub max_rows: usize,
    pub max_chars: usize,
    pub no_think: bool,
    pub seed: u64,
}

impl Default for PolicySettings {
    fn default() -> Self {
        Self {
            policy: "scripted".into(),
            script: None,
            generation_url: None,
            temperature: None,
            top_p: None,
            max_new_tokens: 512,
            judge: "local".into(),
            judge_url: None,
            t_max: 10,
            max_rows: 10,
            max_chars: 2000,
            no_think: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EpisodeArgs {
    #[arg(long, env = "KGQA_QUESTION")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    #[arg(long, env = "KGQA_QUESTION_ID")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    /// Gold answer: <iri>, prefix:name, "literal", true or false.
    #[arg(long, env = "KGQA_GOLD")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gold: Option<String>,
    /// Accepted alternative answers (repeatable).
    #[arg(long = "alias")]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
    /// Append the episode record to this log.
    #[arg(long, env = "KGQA_EPISODE_LOG")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
    #[arg(long, env = "KGQA_SYSTEM_ID")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_id: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub executor: ExecutorArgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeSettings {
    pub question: Option<String>,
    pub question_id: String,
    pub gold: Option<String>,
    pub aliases: Vec<String>,
    pub log: Option<PathBuf>,
    pub system_id: String,
    #[serde(flatten)]
    pub policy: PolicySettings,
    #[serde(flatten)]
    pub executor: ExecutorSettings,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        Self {
            question: None,
            question_id: "q0".into(),
            gold: None,
            aliases: Vec::new(),
            log: None,
            system_id: "cli".into(),
            policy: PolicySettings::default(),
            executor: ExecutorSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RunArgs {
    /// Curated dataset (output of `curate`).
    #[arg(long, env = "KGQA_DATASET")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Episode log to write.
    #[arg(long, env = "KGQA_EPISODE_LOG")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<PathBuf>,
    /// b1, b2, b3 or agent.
    #[arg(long, env = "KGQA_SYSTEM")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    #[arg(long, env = "KGQA_SYSTEM_ID")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_id: Option<String>,
    /// Samples per question (5 for pass@5).
    #[arg(long, env = "KGQA_SAMPLES")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<u32>,
    #[arg(long, env = "KGQA_PARALLELISM")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub policy: PolicyArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub executor: ExecutorArgs,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub dataset: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub system: String,
    pub system_id: Option<String>,
    pub samples: u32,
    pub parallelism: usize,
    #[serde(flatten)]
    pub policy: PolicySettings,
    #[serde(flatten)]
    pub executor: ExecutorSettings,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            dataset: None,
            log: None,
            system: "b3".into(),
            system_id: None,
            samples: 1,
            parallelism: 4,
            policy: PolicySettings::default(),
            executor: ExecutorSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainToyArgs {
    #[arg(long, env = "KGQA_WORLD_SEED")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world_seed: Option<u64>,
    #[arg(long, env = "KGQA_N_ENTITIES")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_entities: Option<usize>,
    #[arg(long, env = "KGQA_N_TASKS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_tasks: Option<usize>,
    #[arg(long, env = "KGQA_SEED")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long, env = "KGQA_STEPS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long, env = "KGQA_GROUP_SIZE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    #[arg(long, env = "KGQA_BATCH_QUESTIONS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_questions: Option<usize>,
    #[arg(long, env = "KGQA_LEARNING_RATE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[arg(long, env = "KGQA_KL_BETA")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_beta: Option<f64>,
    /// Mean-centre advantages without dividing by the group std.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub no_std_normalize: bool,
    #[arg(long, env = "KGQA_TEMPERATURE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[arg(long, env = "KGQA_PRIOR_QUERY_BIAS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_query_bias: Option<f64>,
    /// Rollout threads (0 = all cores); results do not depend on it.
    #[arg(long, env = "KGQA_WORKERS")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// Output directory for curves.csv, summary.jsonl and policy.json.
    #[arg(long, env = "KGQA_OUT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainToySettings {
    pub world_seed: u64,
    pub n_entities: usize,
    pub n_tasks: usize,
    pub seed: u64,
    pub steps: usize,
    pub group_size: usize,
    pub batch_questions: usize,
    pub learning_rate: f64,
    pub kl_beta: f64,
    pub no_std_normalize: bool,
    pub temperature: f64,
    pub prior_query_bias: f64,
    pub workers: usize,
    pub out: PathBuf,
}

impl Default for TrainToySettings {
    fn default() -> Self {
        let d = ToyTrainConfig::default();
        Self {
            world_seed: d.world_seed,
            n_entities: d.n_entities,
            n_tasks: d.n_tasks,
            seed: d.seed,
            steps: d.steps,
            group_size: d.grpo.group_size,
            batch_questions: d.grpo.batch_questions,
            learning_rate: d.grpo.learning_rate,
            kl_beta: d.grpo.kl_beta,
            no_std_normalize: !d.grpo.normalize_by_std,
            temperature: d.temperature,
            prior_query_bias: d.prior_query_bias,
            workers: d.workers,
            out: PathBuf::from("toy-out"),
        }
    }
}

impl TrainToySettings {
    pub fn to_config(&self) -> ToyTrainConfig {
        let d = ToyTrainConfig::default();
        ToyTrainConfig {
            world_seed: self.world_seed,
            n_entities: self.n_entities,
            n_tasks: self.n_tasks,
            seed: self.seed,
            steps: self.steps,
            grpo: GrpoConfig {
                group_size: self.group_size,
                batch_questions: self.batch_questions,
                learning_rate: self.learning_rate,
                kl_beta: self.kl_beta,
                normalize_by_std: !self.no_std_normalize,
                ..d.grpo
            },
            temperature: self.temperature,
            prior_query_bias: self.prior_query_bias,
            workers: self.workers,
            ..d
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Episode logs (repeatable).
    #[arg(long = "log")]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub logs: Vec<PathBuf>,
    /// Metrics report (line-delimited JSON).
    #[arg(long, env = "KGQA_REPORT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    /// Two system ids to compare with McNemar's test: A,B.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compare: Option<Vec<String>>,
    /// Discordant counts N01,N10 to test directly.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discordant: Option<Vec<u64>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateSettings {
    pub logs: Vec<PathBuf>,
    pub report: Option<PathBuf>,
    pub compare: Vec<String>,
    pub discordant: Vec<u64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ExportArgs {
    /// Episode logs (repeatable).
    #[arg(long = "log")]
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub logs: Vec<PathBuf>,
    #[arg(long, env = "KGQA_OUT")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Only `word` (word and punctuation tokens) is built in.
    #[arg(long, env = "KGQA_TOKENIZER")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<String>,
    /// System prompt included in the record text (default: the agent prompt).
    #[arg(long, env = "KGQA_SYSTEM_PROMPT_FILE")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_prompt_file: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub no_std_normalize: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExportSettings {
    pub logs: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub tokenizer: String,
    pub system_prompt_file: Option<PathBuf>,
    pub no_std_normalize: bool,
}

impl Default for ExportSettings {
    fn default() -> Self {
        Self {
            logs: Vec::new(),
            out: None,
            tokenizer: "word".into(),
            system_prompt_file: None,
            no_std_normalize: false,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

fn fatal(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_FATAL,
        message: message.into(),
    }
}

type CliResult = Result<i32, CliError>;

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// defaults ← file section ← flags and environment.
pub fn resolve<S, A>(section: &str, file: Option<&toml::Table>, args: &A) -> Result<S, CliError>
where
    S: Serialize + DeserializeOwned + Default,
    A: Serialize,
{
    let mut v = serde_json::to_value(S::default()).map_err(|e| fatal(e.to_string()))?;
    if let Some(table) = file.and_then(|f| f.get(section)) {
        merge(
            &mut v,
            serde_json::to_value(table).map_err(|e| fatal(e.to_string()))?,
        );
    }
    merge(
        &mut v,
        serde_json::to_value(args).map_err(|e| fatal(e.to_string()))?,
    );
    serde_json::from_value(v).map_err(|e| fatal(format!("invalid [{section}] settings: {e}")))
}

fn announce<S: Serialize>(command: &str, settings: &S) {
    eprintln!(
        "kgqa {command} settings: {}",
        serde_json::to_string(settings).unwrap_or_default()
    );
}

fn load_file(path: Option<&Path>) -> Result<Option<toml::Table>, CliError> {
    let Some(path) = path else { return Ok(None) };
    let text = fs::read_to_string(path)
        .map_err(|e| fatal(format!("cannot read config {}: {e}", path.display())))?;
    text.parse::<toml::Table>()
        .map(Some)
        .map_err(|e| fatal(format!("config {}: {e}", path.display())))
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_FATAL } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .try_init();
    let outcome = load_file(cli.config.as_deref()).and_then(|file| {
        let file = file.as_ref();
        match &cli.command {
            Command::Serve(a) => cmd_serve(resolve("serve", file, a)?),
            Command::Curate(a) => cmd_curate(resolve("curate", file, a)?),
            Command::Episode(a) => cmd_episode(resolve("episode", file, a)?),
            Command::Run(a) => cmd_run(resolve("run", file, a)?),
            Command::TrainToy(a) => cmd_train_toy(resolve("train_toy", file, a)?),
            Command::Evaluate(a) => cmd_evaluate(resolve("evaluate", file, a)?),
            Command::ExportRecords(a) => cmd_export_records(resolve("export_records", file, a)?),
        }
    });
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn load_store(path: &Path) -> Result<Arc<TripleStore>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| fatal(format!("cannot read store {}: {e}", path.display())))?;
    load_ntriples(&text, PrefixMap::standard())
        .map(Arc::new)
        .map_err(|e| fatal(format!("{}: {e}", path.display())))
}

fn build_executor(s: &ExecutorSettings) -> Result<Executor, CliError> {
    if let Some(store) = &s.store {
        return Ok(Executor::Embedded(load_store(store)?));
    }
    let Some(url) = &s.endpoint else {
        return Err(fatal("either --store or --endpoint is required"));
    };
    let cfg = EndpointConfig {
        url: url.clone(),
        timeout: Duration::from_millis(s.timeout_ms),
        max_retries: s.max_retries,
        cache_capacity: s.cache_capacity,
        max_parallel: s.max_parallel,
        ..EndpointConfig::default()
    };
    SparqlClient::new(cfg)
        .map(|c| Executor::Remote(Arc::new(c)))
        .map_err(|e| fatal(e.to_string()))
}

fn cmd_serve(s: ServeSettings) -> CliResult {
    announce("serve", &s);
    let store = match &s.store {
        Some(p) => load_store(p)?,
        None => return Err(fatal("--store is required")),
    };
    let cfg = ServerConfig {
        bind: s.bind.clone(),
        artificial_latency: (s.latency_ms > 0).then(|| Duration::from_millis(s.latency_ms)),
        fail_pattern: s.fail_pattern.clone(),
    };
    let handle = serve(store, cfg).map_err(|e| fatal(e.to_string()))?;
    println!("listening on {}", handle.url());
    let _ = std::io::stdout().flush();
    handle.run_until_signal();
    eprintln!("stopped");
    Ok(EXIT_OK)
}

fn cmd_curate(s: CurateSettings) -> CliResult {
    announce("curate", &s);
    let input = s
        .input
        .as_ref()
        .ok_or_else(|| fatal("--input is required"))?;
    let output = s
        .output
        .as_ref()
        .ok_or_else(|| fatal("--output is required"))?;
    let file =
        File::open(input).map_err(|e| fatal(format!("cannot open {}: {e}", input.display())))?;
    let records = read_raw_records(BufReader::new(file), s.default_split)
        .map_err(|e| fatal(format!("{}: {e}", input.display())))?;
    let executor = build_executor(&s.executor)?;
    let out = File::create(output)
        .map_err(|e| fatal(format!("cannot create {}: {e}", output.display())))?;
    let summary = curate_dataset(&records, &executor, s.parallelism, BufWriter::new(out))
        .map_err(|e| fatal(e.to_string()))?;
    let summary_path = s
        .summary
        .clone()
        .unwrap_or_else(|| with_suffix(output, ".summary.json"));
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&summary_path, format!("{json}\n")).map_err(|e| fatal(e.to_string()))?;
    println!(
        "{}",
        serde_json::to_string(&summary).expect("summary serializes")
    );
    if summary.rerunnable.is_empty() {
        return Ok(EXIT_OK);
    }
    let rerun_path = with_suffix(output, ".rerun.jsonl");
    let mut w = BufWriter::new(File::create(&rerun_path).map_err(|e| fatal(e.to_string()))?);
    for r in records
        .iter()
        .filter(|r| summary.rerunnable.contains(&r.id))
    {
        serde_json::to_writer(&mut w, r).map_err(|e| fatal(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| fatal(e.to_string()))?;
    }
    w.flush().map_err(|e| fatal(e.to_string()))?;
    eprintln!(
        "{} records failed for transient reasons; rerun them from {}",
        summary.rerunnable.len(),
        rerun_path.display()
    );
    Ok(EXIT_PARTIAL)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Parses `<iri>`, `prefix:name`, `"literal"` (optionally `^^<dt>` / `@lang`), `true`, `false`.
pub fn parse_gold(text: &str, prefixes: &PrefixMap) -> Result<RdfTerm, String> {
    let t = text.trim();
    if t == "true" || t == "false" {
        return Ok(RdfTerm::Boolean { value: t == "true" });
    }
    if t.starts_with('<') || t.starts_with('"') {
        let line = format!("<urn:s> <urn:p> {t} .");
        let store = load_ntriples(&line, PrefixMap::new()).map_err(|e| e.to_string())?;
        return Ok(store.triples()[0].object.clone());
    }
    if let Some(iri) = prefixes.expand(t) {
        return Ok(RdfTerm::iri(iri));
    }
    Ok(RdfTerm::literal(t))
}

fn read_script(path: &Path) -> Result<Vec<String>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| fatal(format!("cannot read script {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| {
        fatal(format!(
            "script {} must be a JSON array of strings: {e}",
            path.display()
        ))
    })
}

fn decoding(p: &PolicySettings, kind: SystemKind) -> DecodingParams {
    let d = kind.default_decoding();
    DecodingParams {
        temperature: p.temperature.unwrap_or(d.temperature),
        top_p: p.top_p.unwrap_or(d.top_p),
        max_new_tokens: p.max_new_tokens,
    }
}

type PolicyFactory = Box<dyn Fn() -> Box<dyn Policy> + Sync>;

fn policy_factory(p: &PolicySettings, kind: SystemKind) -> Result<PolicyFactory, CliError> {
    match p.policy.as_str() {
        "scripted" => {
            let script = read_script(
                p.script
                    .as_deref()
                    .ok_or_else(|| fatal("--script is required for the scripted policy"))?,
            )?;
            Ok(Box::new(move || {
                Box::new(ScriptedPolicy::new(script.clone())) as Box<dyn Policy>
            }))
        }
        "remote" => {
            let url = p
                .generation_url
                .clone()
                .ok_or_else(|| fatal("--generation-url is required for the remote policy"))?;
            let params = decoding(p, kind);
            params.validate().map_err(fatal)?;
            let client = GenerationClient::new(GenerationConfig::new(url))
                .map_err(|e| fatal(e.to_string()))?;
            let system = kind.system_message();
            Ok(Box::new(move || {
                Box::new(RemotePolicy::new(client.clone(), system.clone(), params))
                    as Box<dyn Policy>
            }))
        }
        other => Err(fatal(format!(
            "unknown policy '{other}' (expected scripted or remote)"
        ))),
    }
}

fn build_judge(p: &PolicySettings) -> Result<Judge, CliError> {
    match p.judge.as_str() {
        "local" => Ok(Judge::local()),
        "remote" => {
            let url = p
                .judge_url
                .clone()
                .ok_or_else(|| fatal("--judge-url is required for the remote judge"))?;
            let client = GenerationClient::new(GenerationConfig::new(url))
                .map_err(|e| fatal(e.to_string()))?;
            Ok(Judge::Remote(RemoteJudge::new(
                client,
                format!("remote-{}", crate::prompts::PROMPT_VERSION),
            )))
        }
        other => Err(fatal(format!(
            "unknown judge '{other}' (expected local or remote)"
        ))),
    }
}

fn episode_config(p: &PolicySettings, executor: Executor) -> Result<EpisodeConfig, CliError> {
    if p.t_max == 0 {
        return Err(fatal("t_max must be at least 1"));
    }
    let mut cfg = EpisodeConfig::new(executor);
    cfg.t_max = p.t_max;
    cfg.render.max_rows = p.max_rows;
    cfg.render.max_chars = p.max_chars;
    cfg.require_think = !p.no_think;
    Ok(cfg)
}

fn append_log(path: &Path, records: &[EpisodeRecord]) -> Result<(), CliError> {
    let file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| fatal(format!("cannot open log {}: {e}", path.display())))?;
    write_episode_log(BufWriter::new(file), records).map_err(|e| fatal(e.to_string()))
}

fn cmd_episode(s: EpisodeSettings) -> CliResult {
    announce("episode", &s);
    let question = s
        .question
        .clone()
        .ok_or_else(|| fatal("--question is required"))?;
    let gold = s
        .gold
        .as_deref()
        .map(|g| parse_gold(g, &PrefixMap::standard()))
        .transpose()
        .map_err(|e| fatal(format!("--gold: {e}")))?;
    let judge = build_judge(&s.policy)?;
    let env = Environment::new(episode_config(&s.policy, build_executor(&s.executor)?)?);
    let mut policy = policy_factory(&s.policy, SystemKind::Agent)?();
    let (trajectory, stats) =
        match env.run_episode(policy.as_mut(), &s.question_id, &question, s.policy.seed) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("episode aborted: {}", e.message);
                return Ok(EXIT_PARTIAL);
            }
        };
    let (text, _) = serialize_state(&trajectory, "");
    println!("=== transcript ===\n{text}\n=== end ===");
    println!(
        "STATS {}",
        serde_json::to_string(&stats).expect("stats serialize")
    );
    let judgment = match (&trajectory.final_answer, &gold) {
        (Some(answer), Some(gold)) => Some(judge.judge(&question, answer, gold, &s.aliases)),
        _ => None,
    };
    if let Some(j) = &judgment {
        println!(
            "JUDGMENT {}",
            serde_json::to_string(j).expect("judgment serializes")
        );
    }
    let reward = match score(
        &trajectory,
        &stats,
        judgment.as_ref(),
        &RewardConfig::default(),
    ) {
        Ok(r) => {
            println!(
                "REWARD {}",
                serde_json::to_string(&r).expect("reward serializes")
            );
            Some(r)
        }
        Err(_) => {
            println!("REWARD unavailable: a valid episode needs --gold to be judged");
            None
        }
    };
    if let Some(path) = &s.log {
        let record = EpisodeRecord {
            question_id: s.question_id.clone(),
            system_id: s.system_id.clone(),
            sample: 0,
            seed: s.policy.seed,
            trajectory,
            stats,
            gold,
            judgment,
            reward,
        };
        append_log(path, &[record])?;
    }
    Ok(EXIT_OK)
}

fn cmd_run(s: RunSettings) -> CliResult {
    announce("run", &s);
    let kind: SystemKind = s.system.parse().map_err(fatal)?;
    let dataset = s
        .dataset
        .as_ref()
        .ok_or_else(|| fatal("--dataset is required"))?;
    let log = s.log.as_ref().ok_or_else(|| fatal("--log is required"))?;
    let file = File::open(dataset)
        .map_err(|e| fatal(format!("cannot open {}: {e}", dataset.display())))?;
    let questions: Vec<Question> = read_curated(BufReader::new(file))
        .map_err(|e| fatal(format!("{}: {e}", dataset.display())))?
        .iter()
        .map(Question::from)
        .collect();
    let cfg = RunConfig {
        system_id: s.system_id.clone().unwrap_or_else(|| kind.to_string()),
        kind,
        episode: episode_config(&s.policy, build_executor(&s.executor)?)?,
        reward: RewardConfig::default(),
        samples: s.samples.max(1),
        seed: s.policy.seed,
        parallelism: s.parallelism,
    };
    let factory = policy_factory(&s.policy, kind)?;
    let judge = build_judge(&s.policy)?;
    let out = run_system(&questions, factory.as_ref(), &judge, &cfg);
    let file =
        File::create(log).map_err(|e| fatal(format!("cannot create {}: {e}", log.display())))?;
    write_episode_log(BufWriter::new(file), &out.records).map_err(|e| fatal(e.to_string()))?;
    let results: Vec<RunResult> = out.records.iter().map(RunResult::from).collect();
    print!(
        "{}",
        render_table(&[system_report(&cfg.system_id, &results)])
    );
    if out.aborted.is_empty() {
        Ok(EXIT_OK)
    } else {
        eprintln!("{} episodes aborted by policy failures", out.aborted.len());
        Ok(EXIT_PARTIAL)
    }
}

fn cmd_train_toy(s: TrainToySettings) -> CliResult {
    announce("train-toy", &s);
    let cfg = s.to_config();
    cfg.grpo.validate().map_err(|e| fatal(e.to_string()))?;
    if s.n_entities < 10 {
        return Err(fatal("n_entities must be at least 10"));
    }
    let world = generate_world(cfg.world_seed, cfg.n_entities, cfg.n_tasks);
    if world.tasks.is_empty() {
        return Err(fatal("the generated world has no tasks"));
    }
    let out = train_toy(&world, &cfg);
    fs::create_dir_all(&s.out)
        .map_err(|e| fatal(format!("cannot create {}: {e}", s.out.display())))?;
    let curves = File::create(s.out.join("curves.csv")).map_err(|e| fatal(e.to_string()))?;
    write_curves(curves, &out.curves).map_err(|e| fatal(e.to_string()))?;
    let summary = serde_json::to_string(&out.summary).expect("summary serializes");
    fs::write(s.out.join("summary.jsonl"), format!("{summary}\n"))
        .map_err(|e| fatal(e.to_string()))?;
    let policy = serde_json::to_string(&out.policy).expect("policy serializes");
    fs::write(s.out.join("policy.json"), format!("{policy}\n"))
        .map_err(|e| fatal(e.to_string()))?;
    println!("{summary}");
    Ok(EXIT_OK)
}

fn read_logs(paths: &[PathBuf]) -> Result<Vec<EpisodeRecord>, CliError> {
    let mut all = Vec::new();
    for p in paths {
        let file = File::open(p).map_err(|e| fatal(format!("cannot open {}: {e}", p.display())))?;
        all.extend(
            read_episode_log(BufReader::new(file))
                .map_err(|e| fatal(format!("{}: {e}", p.display())))?,
        );
    }
    Ok(all)
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ReportLine<'a> {
    System(&'a crate::eval::SystemReport),
    Mcnemar(&'a McNemarReport),
}

fn cmd_evaluate(s: EvaluateSettings) -> CliResult {
    announce("evaluate", &s);
    if s.logs.is_empty() && s.discordant.is_empty() {
        return Err(fatal("give at least one --log or --discordant N01,N10"));
    }
    let results: Vec<RunResult> = read_logs(&s.logs)?.iter().map(RunResult::from).collect();
    let by_system = group_by_system(&results);
    let reports: Vec<_> = by_system
        .iter()
        .map(|(id, rs)| system_report(id, rs))
        .collect();
    let mut tests = Vec::new();
    match s.compare.as_slice() {
        [] => {}
        [a, b] => {
            let ra = by_system
                .get(a)
                .ok_or_else(|| fatal(format!("no runs for system '{a}'")))?;
            let rb = by_system
                .get(b)
                .ok_or_else(|| fatal(format!("no runs for system '{b}'")))?;
            let d = discordance(ra, rb);
            tests.push(McNemarReport::new(a, b, d.n01, d.n10));
        }
        _ => return Err(fatal("--compare takes exactly two system ids")),
    }
    match s.discordant.as_slice() {
        [] => {}
        [n01, n10] => tests.push(McNemarReport::new("A", "B", *n01, *n10)),
        _ => return Err(fatal("--discordant takes exactly two counts")),
    }
    if !reports.is_empty() {
        print!("{}", render_table(&reports));
    }
    for t in &tests {
        let chi2 = t.chi2.map_or("n/a (no discordant pairs)".to_string(), |c| {
            format!("{c:.2}")
        });
        let p = t.p_value.map_or("n/a".to_string(), |p| format!("{p:.3e}"));
        println!(
            "McNemar {} vs {}: n01={} n10={} chi2={chi2} p={p}",
            t.system_a, t.system_b, t.n01, t.n10
        );
    }
    if let Some(path) = &s.report {
        let mut w = BufWriter::new(
            File::create(path)
                .map_err(|e| fatal(format!("cannot create {}: {e}", path.display())))?,
        );
        let lines = reports
            .iter()
            .map(ReportLine::System)
            .chain(tests.iter().map(ReportLine::Mcnemar));
        for line in lines {
            serde_json::to_writer(&mut w, &line).map_err(|e| fatal(e.to_string()))?;
            w.write_all(b"\n").map_err(|e| fatal(e.to_string()))?;
        }
        w.flush().map_err(|e| fatal(e.to_string()))?;
    }
    Ok(EXIT_OK)
}

fn cmd_export_records(s: ExportSettings) -> CliResult {
    announce("export-records", &s);
    let out = s.out.as_ref().ok_or_else(|| fatal("--out is required"))?;
    let system_prompt = match &s.system_prompt_file {
        Some(p) => {
            fs::read_to_string(p).map_err(|e| fatal(format!("cannot read {}: {e}", p.display())))?
        }
        None => crate::prompts::AGENT_SYSTEM_PROMPT.to_string(),
    };
    let records = read_logs(&s.logs)?;
    let mut groups: Vec<Group> = Vec::new();
    let mut skipped = 0;
    let mut by_key: std::collections::BTreeMap<(String, String), Vec<&EpisodeRecord>> =
        Default::default();
    for r in &records {
        by_key
            .entry((r.system_id.clone(), r.question_id.clone()))
            .or_default()
            .push(r);
    }
    for ((_, qid), members) in by_key {
        let scored: Vec<_> = members
            .iter()
            .filter_map(|r| r.reward.map(|rw| (r.trajectory.clone(), rw)))
            .collect();
        if scored.len() < 2 {
            skipped += members.len();
            continue;
        }
        groups.push(Group {
            prompt_id: qid,
            members: scored,
        });
    }
    if skipped > 0 {
        eprintln!("skipped {skipped} episodes without a scored group of at least 2");
    }
    let cfg = GrpoConfig {
        normalize_by_std: !s.no_std_normalize,
        ..GrpoConfig::default()
    };
    if s.tokenizer != "word" {
        return Err(fatal(format!(
            "unknown tokenizer '{}' (expected word)",
            s.tokenizer
        )));
    }
    let tokenizer = |t: &str| word_token_offsets(t);
    let n = export_records(&groups, &system_prompt, &cfg, &tokenizer, out)
        .map_err(|e| fatal(e.to_string()))?;
    println!("wrote {n} records to {}", out.display());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gold_forms() {
        let p = PrefixMap::standard();
        assert_eq!(
            parse_gold("wd:Q2", &p).unwrap(),
            RdfTerm::iri("http://www.wikidata.org/entity/Q2")
        );
        assert_eq!(
            parse_gold("<http://x/y>", &p).unwrap(),
            RdfTerm::iri("http://x/y")
        );
        assert_eq!(
            parse_gold("true", &p).unwrap(),
            RdfTerm::Boolean { value: true }
        );
        assert_eq!(
            parse_gold("\"Paris\"@en", &p).unwrap(),
            RdfTerm::lang_literal("Paris", "en")
        );
        assert_eq!(parse_gold("42", &p).unwrap(), RdfTerm::literal("42"));
    }

    #[test]
    fn layering() {
        let file: toml::Table = "[train_toy]\nsteps = 5\nseed = 3\n".parse().unwrap();
        let args = TrainToyArgs {
            world_seed: None,
            n_entities: None,
            n_tasks: None,
            seed: Some(9),
            steps: None,
            group_size: None,
            batch_questions: None,
            learning_rate: None,
            kl_beta: None,
            no_std_normalize: false,
            temperature: None,
            prior_query_bias: None,
            workers: None,
            out: None,
        };
        let s: TrainToySettings = resolve("train_toy", Some(&file), &args).unwrap();
        assert_eq!((s.steps, s.seed, s.group_size), (5, 9, 16));
    }
}
