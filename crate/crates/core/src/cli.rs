//! Command-line front end. `dispatch` parses arguments, runs one stage and
//! returns the process exit code.
//!
//! Exit codes: 0 success, 1 usage error, 2 precondition or validation
//! failure, 3 gateway or adapter failure.

use std::collections::{BTreeMap, HashSet};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::classifier::{AdapterConfig, AdapterError, TrainingConfig};
use crate::consistency::{self, ConsistencyError, ConsistencyRecord, GradingTemplate};
use crate::corpus::{
    self, load_corpus, load_pool, save_pool, Corpus, CorpusError, Format, LabeledResponse, Phase,
    Temperature,
};
use crate::evaluation::BootstrapConfig;
use crate::experiments::{
    self, emit_report, metadata_path, AdapterLearner, CurveTable, ExperimentError, NativeLearner,
    ReportFormat, RunMetadata, ScheduleConfig,
};
use crate::gateway::{
    self, ChatRequest, FixtureStore, Gateway, GatewayError, HttpTransport, RetryPolicy,
};
use crate::generator::{self, GenerationConfig, GeneratorError, PromptTemplate, TemplateError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_PRECONDITION: i32 = 2;
pub const EXIT_EXTERNAL: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn precondition(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_PRECONDITION,
            message: msg.into(),
        }
    }

    fn external(msg: impl Into<String>) -> Self {
        CliError {
            code: EXIT_EXTERNAL,
            message: msg.into(),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        CliError::precondition(e.to_string())
    }
}

impl From<TemplateError> for CliError {
    fn from(e: TemplateError) -> Self {
        CliError::precondition(e.to_string())
    }
}

fn gateway_code(e: &GatewayError) -> i32 {
    match e.root() {
        GatewayError::InvalidRequest(_) | GatewayError::Io(_) => EXIT_PRECONDITION,
        _ => EXIT_EXTERNAL,
    }
}

impl From<GatewayError> for CliError {
    fn from(e: GatewayError) -> Self {
        CliError {
            code: gateway_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<GeneratorError> for CliError {
    fn from(e: GeneratorError) -> Self {
        let code = match &e {
            GeneratorError::Gateway { source, .. } => gateway_code(source),
            _ => EXIT_PRECONDITION,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ConsistencyError> for CliError {
    fn from(e: ConsistencyError) -> Self {
        let code = match &e {
            ConsistencyError::Gateway { source, .. } => gateway_code(source),
            _ => EXIT_PRECONDITION,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        CliError {
            code: if e.is_external() {
                EXIT_EXTERNAL
            } else {
                EXIT_PRECONDITION
            },
            message: e.to_string(),
        }
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        CliError::external(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::precondition(format!("I/O error: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::precondition(format!("JSON error: {e}"))
    }
}

/// Gateway settings shared by the stages that talk to the LLM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewaySettings {
    pub fixtures: Option<PathBuf>,
    pub live: bool,
    pub record: Option<PathBuf>,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        GatewaySettings {
            fixtures: None,
            live: false,
            record: None,
            max_in_flight: gateway::DEFAULT_MAX_IN_FLIGHT,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub pool: Option<PathBuf>,
    pub pools_dir: Option<PathBuf>,
    pub records: Option<PathBuf>,
    pub pos: Option<PathBuf>,
    pub neg: Option<PathBuf>,
    pub rubric: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

/// Every setting a stage may need. Loaded from `--config`, then overridden
/// by flags.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub generation: GenerationConfig,
    pub training: TrainingConfig,
    pub schedule: ScheduleConfig,
    pub bootstrap: BootstrapConfig,
    pub gateway: GatewaySettings,
    pub adapter: AdapterConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let body = fs::read_to_string(path)
            .map_err(|e| CliError::precondition(format!("config {}: {e}", path.display())))?;
        serde_json::from_str(&body)
            .map_err(|e| CliError::precondition(format!("config {}: {e}", path.display())))
    }

    /// Propagates the top-level seed into every section.
    fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        self.generation.seed = seed;
        self.training.seed = seed;
        self.schedule.seed = seed;
        self.bootstrap.seed = seed;
        self.adapter.seed = seed;
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "augmentor",
    version,
    about = "Synthetic-sample augmentation pipeline for short-response classifiers"
)]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate a labeled synthetic pool from positive and negative templates.
    Generate(GenerateArgs),
    /// Self-grade every pool sample against the rubric.
    Grade(GradeArgs),
    /// Drop samples whose self-grade contradicts their intended label.
    Filter(FilterArgs),
    /// Train on the human split until saturation and score validation.
    TrainBaseline(BaselineArgs),
    /// Baseline followed by incremental augmentation from one pool.
    Augment(AugmentArgs),
    /// Baseline plus one augmentation curve per temperature.
    Sweep(SweepArgs),
    /// Convert a report between CSV and JSON.
    Report(ReportArgs),
    /// Replay a list of chat requests against the live endpoint and store
    /// the responses as fixtures.
    RecordFixtures(RecordArgs),
}

#[derive(Debug, Args)]
struct GatewayArgs {
    /// Replay responses from this fixture directory.
    #[arg(long, value_name = "DIR", conflicts_with = "live")]
    fixtures: Option<PathBuf>,
    /// Call the live endpoint (AUGMENTOR_API_URL, AUGMENTOR_API_KEY).
    #[arg(long)]
    live: bool,
    /// With --live, also store every response as a fixture.
    #[arg(long, value_name = "DIR", requires = "live")]
    record: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    max_in_flight: Option<usize>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long, value_name = "FILE")]
    pos: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    neg: Option<PathBuf>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, value_name = "N")]
    per_label: Option<usize>,
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Request extra batches when a class falls short.
    #[arg(long)]
    strict: bool,
    /// Human corpus whose texts must not appear in the pool.
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    gateway: GatewayArgs,
}

#[derive(Debug, Args)]
struct GradeArgs {
    #[arg(long, value_name = "FILE")]
    pool: Option<PathBuf>,
    /// Grading template; the bundled rubric is used when omitted.
    #[arg(long, value_name = "FILE")]
    rubric: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    gateway: GatewayArgs,
}

#[derive(Debug, Args)]
struct FilterArgs {
    #[arg(long, value_name = "FILE")]
    pool: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    records: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Where to list removed ids and reasons.
    #[arg(long, value_name = "FILE")]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainingArgs {
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long, value_name = "N")]
    resamples: Option<usize>,
    /// Delegate training to an external process speaking the adapter
    /// protocol; the value is split on whitespace.
    #[arg(long, value_name = "COMMAND")]
    adapter: Option<String>,
    #[arg(long, value_name = "SECS")]
    adapter_timeout: Option<u64>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Baseline curve point as JSON.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Checkpoint of the native model.
    #[arg(long, value_name = "FILE")]
    model_out: Option<PathBuf>,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[arg(long, value_name = "N")]
    increment: Option<usize>,
    #[arg(long, value_name = "N")]
    max_synthetic: Option<usize>,
    /// Fixed epochs per increment instead of training to saturation.
    #[arg(long, value_name = "N")]
    epochs_per_increment: Option<usize>,
}

#[derive(Debug, Args)]
struct AugmentArgs {
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pool: Option<PathBuf>,
    /// Let a pool smaller than --max-synthetic truncate the schedule.
    #[arg(long)]
    allow_short_pool: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; `.json` selects JSON, anything else CSV.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_name = "FILE")]
    corpus: Option<PathBuf>,
    /// Directory of pool files (`*.jsonl`), grouped by record temperature.
    #[arg(long, value_name = "DIR")]
    pools_dir: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_name = "T,...")]
    temps: Option<Vec<f64>>,
    /// Filter every pool through its `<stem>.records.jsonl` gradings first.
    #[arg(long)]
    filtered: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    training: TrainingArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RecordArgs {
    /// JSONL file of chat requests.
    #[arg(long, value_name = "FILE")]
    requests: PathBuf,
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct Summary<'a> {
    cmd: &'a str,
    status: &'a str,
    outputs: Vec<String>,
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

struct Done {
    outputs: Vec<PathBuf>,
}

/// Parses `argv` (including the program name), runs the stage and returns
/// the exit code. Writes the JSON summary line to stdout.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let name = cmd_name(&cli.cmd);
    let (result, seed) = match resolve(&cli) {
        Ok(cfg) => {
            let seed = cfg.seed;
            (run(&cli.cmd, cfg), seed)
        }
        Err(e) => (Err(e), None),
    };
    let (status, outputs, error, code) = match result {
        Ok(done) => (
            "ok",
            done.outputs
                .iter()
                .map(|p| p.display().to_string())
                .collect(),
            None,
            EXIT_OK,
        ),
        Err(e) => {
            log::error!("{}", e.message);
            ("error", Vec::new(), Some(e.message), e.code)
        }
    };
    let summary = Summary {
        cmd: name,
        status,
        outputs,
        seed,
        error,
    };
    let mut out = std::io::stdout().lock();
    let _ = serde_json::to_writer(&mut out, &summary);
    let _ = writeln!(out);
    code
}

fn cmd_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Generate(_) => "generate",
        Cmd::Grade(_) => "grade",
        Cmd::Filter(_) => "filter",
        Cmd::TrainBaseline(_) => "train-baseline",
        Cmd::Augment(_) => "augment",
        Cmd::Sweep(_) => "sweep",
        Cmd::Report(_) => "report",
        Cmd::RecordFixtures(_) => "record-fixtures",
    }
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn set_path(slot: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        slot.clone_from(flag);
    }
}

fn merge_gateway(g: &mut GatewaySettings, a: &GatewayArgs) {
    if a.live {
        g.live = true;
        g.fixtures = None;
    }
    if a.fixtures.is_some() {
        g.live = false;
        g.record = None;
    }
    set_path(&mut g.fixtures, &a.fixtures);
    set_path(&mut g.record, &a.record);
    set(&mut g.max_in_flight, a.max_in_flight);
}

fn merge_training(cfg: &mut RunConfig, a: &TrainingArgs) {
    set(&mut cfg.training.learning_rate, a.learning_rate);
    set(&mut cfg.training.patience, a.patience);
    set(&mut cfg.training.max_epochs, a.max_epochs);
    set(&mut cfg.bootstrap.n_resamples, a.resamples);
    set(&mut cfg.adapter.timeout_secs, a.adapter_timeout);
    if let Some(cmd) = &a.adapter {
        cfg.adapter.command = cmd.split_whitespace().map(str::to_string).collect();
    }
}

fn merge_schedule(s: &mut ScheduleConfig, a: &ScheduleArgs) {
    set(&mut s.increment, a.increment);
    set(&mut s.max_synthetic, a.max_synthetic);
    if a.epochs_per_increment.is_some() {
        s.epochs_per_increment = a.epochs_per_increment;
    }
}

/// Defaults, then the config file, then flags.
fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let p = &mut cfg.paths;
    let seed = match &cli.cmd {
        Cmd::Generate(a) => {
            set_path(&mut p.pos, &a.pos);
            set_path(&mut p.neg, &a.neg);
            set_path(&mut p.corpus, &a.corpus);
            set_path(&mut p.out, &a.out);
            set(&mut cfg.generation.temperature, a.temperature);
            set(&mut cfg.generation.n_total_per_label, a.per_label);
            set(&mut cfg.generation.batch_size, a.batch_size);
            cfg.generation.strict |= a.strict;
            merge_gateway(&mut cfg.gateway, &a.gateway);
            a.seed
        }
        Cmd::Grade(a) => {
            set_path(&mut p.pool, &a.pool);
            set_path(&mut p.rubric, &a.rubric);
            set_path(&mut p.out, &a.out);
            merge_gateway(&mut cfg.gateway, &a.gateway);
            a.seed
        }
        Cmd::Filter(a) => {
            set_path(&mut p.pool, &a.pool);
            set_path(&mut p.records, &a.records);
            set_path(&mut p.out, &a.out);
            set_path(&mut p.manifest, &a.manifest);
            a.seed
        }
        Cmd::TrainBaseline(a) => {
            set_path(&mut p.corpus, &a.corpus);
            set_path(&mut p.out, &a.out);
            merge_training(&mut cfg, &a.training);
            a.seed
        }
        Cmd::Augment(a) => {
            set_path(&mut p.corpus, &a.corpus);
            set_path(&mut p.pool, &a.pool);
            set_path(&mut p.out, &a.out);
            merge_schedule(&mut cfg.schedule, &a.schedule);
            merge_training(&mut cfg, &a.training);
            a.seed
        }
        Cmd::Sweep(a) => {
            set_path(&mut p.corpus, &a.corpus);
            set_path(&mut p.pools_dir, &a.pools_dir);
            set_path(&mut p.out, &a.out);
            if let Some(t) = &a.temps {
                cfg.schedule.temperatures.clone_from(t);
            }
            cfg.schedule.use_filtered_pool |= a.filtered;
            merge_schedule(&mut cfg.schedule, &a.schedule);
            merge_training(&mut cfg, &a.training);
            a.seed
        }
        Cmd::Report(a) => {
            set_path(&mut p.out, &a.out);
            a.seed
        }
        Cmd::RecordFixtures(a) => a.seed,
    };
    let seed = seed.or(cfg.seed).unwrap_or(0);
    cfg.apply_seed(seed);
    Ok(cfg)
}

fn require<'a>(slot: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    slot.as_deref().ok_or_else(|| {
        CliError::precondition(format!(
            "missing --{flag} (or paths.{} in the config)",
            flag.replace('-', "_")
        ))
    })
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    ensure_parent(path)?;
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), CliError> {
    ensure_parent(path)?;
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    corpus::write_jsonl(&mut w, items)?;
    w.flush()?;
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn build_gateway(g: &GatewaySettings) -> Result<Gateway, CliError> {
    let gw = if g.live {
        let transport = HttpTransport::from_env()?;
        let mut gw = Gateway::live(Box::new(transport), g.retry);
        if let Some(dir) = &g.record {
            gw = gw.recording_into(FixtureStore::create(dir)?);
        }
        gw
    } else {
        let dir = g
            .fixtures
            .as_ref()
            .ok_or_else(|| CliError::precondition("choose --fixtures DIR (replay) or --live"))?;
        if !dir.is_dir() {
            return Err(CliError::precondition(format!(
                "fixture directory {} does not exist",
                dir.display()
            )));
        }
        Gateway::replay(FixtureStore::open(dir))
    };
    Ok(gw.with_max_in_flight(g.max_in_flight.max(1)))
}

fn load_corpus_at(path: &Path) -> Result<Corpus, CliError> {
    Ok(load_corpus(path, Format::from_path(path))?)
}

fn run(cmd: &Cmd, cfg: RunConfig) -> Result<Done, CliError> {
    match cmd {
        Cmd::Generate(_) => cmd_generate(&cfg),
        Cmd::Grade(_) => cmd_grade(&cfg),
        Cmd::Filter(_) => cmd_filter(&cfg),
        Cmd::TrainBaseline(a) => cmd_baseline(&cfg, a.model_out.as_deref()),
        Cmd::Augment(a) => cmd_augment(&cfg, a.allow_short_pool),
        Cmd::Sweep(_) => cmd_sweep(&cfg),
        Cmd::Report(a) => cmd_report(&cfg, &a.input),
        Cmd::RecordFixtures(a) => cmd_record(&cfg, &a.requests, &a.out_dir),
    }
}

fn cmd_generate(cfg: &RunConfig) -> Result<Done, CliError> {
    let p = &cfg.paths;
    let out = require(&p.out, "out")?;
    let pos = PromptTemplate::load(require(&p.pos, "pos")?)?;
    let neg = PromptTemplate::load(require(&p.neg, "neg")?)?;
    if cfg.generation.n_total_per_label == 0 {
        return Err(CliError::precondition("--per-label must be at least 1"));
    }
    let exclude = match &p.corpus {
        Some(c) => load_corpus_at(c)?.human_texts(),
        None => HashSet::new(),
    };
    let gw = build_gateway(&cfg.gateway)?;
    let outcome = generator::generate_pool(&pos, &neg, &cfg.generation, &gw, &exclude)?;
    let r = &outcome.report;
    log::info!(
        "generated {} samples from {} requests ({} duplicates, {} leaks dropped, shortfall {:?})",
        outcome.pool.len(),
        r.requests,
        r.duplicates_dropped,
        r.leaks_dropped,
        r.shortfall
    );
    ensure_parent(out)?;
    save_pool(&outcome.pool, out)?;
    let report_path = with_suffix(out, ".generation.json");
    write_json(&report_path, r)?;
    Ok(Done {
        outputs: vec![out.to_path_buf(), report_path],
    })
}

fn cmd_grade(cfg: &RunConfig) -> Result<Done, CliError> {
    let p = &cfg.paths;
    let out = require(&p.out, "out")?;
    let pool = load_pool(require(&p.pool, "pool")?)?;
    let tpl = match &p.rubric {
        Some(r) => GradingTemplate::load(r)?,
        None => GradingTemplate::default_rubric(),
    };
    let gw = build_gateway(&cfg.gateway)?;
    let records = consistency::grade_pool(&pool, &tpl, &gw)?;
    let unparsed = records.iter().filter(|r| !r.parse_ok).count();
    match consistency::agreement_metrics(&records) {
        Ok(m) => log::info!(
            "graded {} samples ({} unparseable): accuracy {:.4}, precision {:.4}, recall {:.4}, kappa {}",
            records.len(),
            unparsed,
            m.accuracy,
            m.precision,
            m.recall,
            m.kappa.map_or("undefined".to_string(), |k| format!("{k:.4}"))
        ),
        Err(e) => log::warn!("agreement metrics unavailable: {e}"),
    }
    write_jsonl(out, &records)?;
    Ok(Done {
        outputs: vec![out.to_path_buf()],
    })
}

fn cmd_filter(cfg: &RunConfig) -> Result<Done, CliError> {
    let p = &cfg.paths;
    let out = require(&p.out, "out")?;
    let pool = load_pool(require(&p.pool, "pool")?)?;
    let records: Vec<ConsistencyRecord> = corpus::read_jsonl(require(&p.records, "records")?)?;
    let outcome = consistency::filter_inconsistent(&pool, &records)?;
    log::info!(
        "retained {} of {} samples ({:.1}%)",
        outcome.retained.len(),
        pool.len(),
        100.0 * outcome.retention()
    );
    ensure_parent(out)?;
    save_pool(&outcome.retained, out)?;
    let mut outputs = vec![out.to_path_buf()];
    if let Some(m) = &p.manifest {
        write_jsonl(m, &outcome.removed)?;
        outputs.push(m.clone());
    }
    Ok(Done { outputs })
}

#[derive(Serialize)]
struct BaselineReport<'a> {
    baseline: experiments::CurvePoint,
    learner: &'a str,
    training: &'a TrainingConfig,
    bootstrap: &'a BootstrapConfig,
    human_train: usize,
    validation: usize,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    per_phase: BTreeMap<Phase, f64>,
}

fn cmd_baseline(cfg: &RunConfig, model_out: Option<&Path>) -> Result<Done, CliError> {
    let p = &cfg.paths;
    let out = require(&p.out, "out")?;
    let corpus = load_corpus_at(require(&p.corpus, "corpus")?)?;
    let mut outputs = Vec::new();
    let (point, per_phase, learner) = if cfg.adapter.command.is_empty() {
        cfg.training
            .validate()
            .map_err(|e| CliError::precondition(e.to_string()))?;
        let mut l = NativeLearner::new(cfg.training.clone());
        let (point, phases) = experiments::run_baseline_by_phase(&mut l, &corpus, &cfg.bootstrap)?;
        if let Some(m) = model_out {
            ensure_parent(m)?;
            l.model
                .save(m)
                .map_err(|e| CliError::precondition(e.to_string()))?;
            outputs.push(m.to_path_buf());
        }
        (point, phases, "native")
    } else {
        let mut l = AdapterLearner::spawn(&cfg.adapter)?;
        let (point, phases) = experiments::run_baseline_by_phase(&mut l, &corpus, &cfg.bootstrap)?;
        l.shutdown()?;
        (point, phases, "adapter")
    };
    log::info!(
        "baseline auc {:.4} [{:.4}, {:.4}]",
        point.auc,
        point.ci_low,
        point.ci_high
    );
    write_json(
        out,
        &BaselineReport {
            baseline: point,
            learner,
            training: &cfg.training,
            bootstrap: &cfg.bootstrap,
            human_train: corpus.human_train.len(),
            validation: corpus.validation.len(),
            per_phase,
        },
    )?;
    outputs.insert(0, out.to_path_buf());
    Ok(Done { outputs })
}

fn pool_temperature(pool: &[LabeledResponse]) -> Result<f64, CliError> {
    let temps: Vec<f64> = pool.iter().filter_map(|r| r.temperature).collect();
    match temps.first() {
        Some(&t) if temps.len() == pool.len() && temps.iter().all(|&x| x == t) => Ok(t),
        _ => Err(CliError::precondition(
            "pool must hold synthetic records of a single temperature",
        )),
    }
}

fn finish_report(table: &CurveTable, corpus: &Corpus, cfg: &RunConfig) -> Result<Done, CliError> {
    let out = require(&cfg.paths.out, "out")?;
    let mut meta = RunMetadata::new(table, corpus, &cfg.schedule, &cfg.training, &cfg.bootstrap);
    meta.config = Some(serde_json::to_value(cfg)?);
    let outputs = emit_report(table, &meta, ReportFormat::from_path(out), out)?;
    Ok(Done { outputs })
}

fn cmd_augment(cfg: &RunConfig, allow_short_pool: bool) -> Result<Done, CliError> {
    let p = &cfg.paths;
    require(&p.out, "out")?;
    let corpus = load_corpus_at(require(&p.corpus, "corpus")?)?;
    let pool = load_pool(require(&p.pool, "pool")?)?;
    let t = pool_temperature(&pool)?;
    let (baseline, curve) = if cfg.adapter.command.is_empty() {
        cfg.training
            .validate()
            .map_err(|e| CliError::precondition(e.to_string()))?;
        let mut l = NativeLearner::new(cfg.training.clone())
            .with_epochs_per_increment(cfg.schedule.epochs_per_increment);
        let b = experiments::run_baseline(&mut l, &corpus, &cfg.bootstrap)?;
        let c = experiments::run_augmentation(
            &mut l,
            &corpus,
            &pool,
            t,
            &cfg.schedule,
            &cfg.bootstrap,
            allow_short_pool,
        )?;
        (b, c)
    } else {
        let mut l = AdapterLearner::spawn(&cfg.adapter)?;
        let b = experiments::run_baseline(&mut l, &corpus, &cfg.bootstrap)?;
        let c = experiments::run_augmentation(
            &mut l,
            &corpus,
            &pool,
            t,
            &cfg.schedule,
            &cfg.bootstrap,
            allow_short_pool,
        )?;
        l.shutdown()?;
        (b, c)
    };
    let table = CurveTable {
        baseline,
        curves: vec![curve],
        retention: None,
    };
    finish_report(&table, &corpus, cfg)
}

fn is_pool_file(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".jsonl")
        && !name.ends_with(".records.jsonl")
        && !name.ends_with(".removed.jsonl")
}

type PoolMap = BTreeMap<Temperature, Vec<LabeledResponse>>;

/// Pools found in `dir`, grouped by record temperature. With `filtered`,
/// each pool file is first filtered through `<stem>.records.jsonl`; the
/// returned retention covers every filtered file.
pub fn load_pools_dir(dir: &Path, filtered: bool) -> Result<(PoolMap, Option<f64>), CliError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::precondition(format!("pools directory {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_pool_file(p))
        .collect();
    files.sort();
    let mut pools: BTreeMap<Temperature, Vec<LabeledResponse>> = BTreeMap::new();
    let (mut kept, mut total) = (0usize, 0usize);
    for f in files {
        let mut pool = load_pool(&f)?;
        if filtered {
            let stem = f
                .file_name()
                .and_then(|n| n.to_str())
                .unwrap_or("")
                .trim_end_matches(".jsonl");
            let rec_path = f.with_file_name(format!("{stem}.records.jsonl"));
            if !rec_path.is_file() {
                return Err(CliError::precondition(format!(
                    "--filtered needs {} next to {}",
                    rec_path.display(),
                    f.display()
                )));
            }
            let records: Vec<ConsistencyRecord> = corpus::read_jsonl(&rec_path)?;
            let outcome = consistency::filter_inconsistent(&pool, &records)?;
            total += pool.len();
            kept += outcome.retained.len();
            pool = outcome.retained;
        }
        for rec in pool {
            let t = rec.temperature.ok_or_else(|| {
                CliError::precondition(format!(
                    "{}: record `{}` has no temperature",
                    f.display(),
                    rec.id
                ))
            })?;
            pools.entry(Temperature(t)).or_default().push(rec);
        }
    }
    let retention = (filtered && total > 0).then(|| kept as f64 / total as f64);
    Ok((pools, retention))
}

fn cmd_sweep(cfg: &RunConfig) -> Result<Done, CliError> {
    let p = &cfg.paths;
    require(&p.out, "out")?;
    if !cfg.adapter.command.is_empty() {
        return Err(CliError::precondition(
            "sweep runs temperature branches in parallel and supports only the native learner",
        ));
    }
    cfg.training
        .validate()
        .map_err(|e| CliError::precondition(e.to_string()))?;
    let corpus = load_corpus_at(require(&p.corpus, "corpus")?)?;
    let filtered = cfg.schedule.use_filtered_pool;
    let (pools, retention) = load_pools_dir(require(&p.pools_dir, "pools-dir")?, filtered)?;
    let table = if filtered {
        let r = retention.ok_or_else(|| CliError::precondition("no pool files found"))?;
        log::info!(
            "consistency filtering retained {:.1}% of the pools",
            100.0 * r
        );
        experiments::run_experiment_3(
            &corpus,
            &pools,
            r,
            &cfg.schedule,
            &cfg.training,
            &cfg.bootstrap,
        )?
    } else {
        experiments::run_experiment_2(
            &corpus,
            &pools,
            &cfg.schedule,
            &cfg.training,
            &cfg.bootstrap,
        )?
    };
    finish_report(&table, &corpus, cfg)
}

#[derive(Serialize, Deserialize)]
struct JsonReportFile {
    rows: Vec<experiments::CurvePoint>,
    metadata: serde_json::Value,
}

fn cmd_report(cfg: &RunConfig, input: &Path) -> Result<Done, CliError> {
    let out = require(&cfg.paths.out, "out")?;
    let (rows, metadata) = match ReportFormat::from_path(input) {
        ReportFormat::Csv => {
            let rows = experiments::read_report_rows(input)?;
            let side = metadata_path(input);
            let meta = if side.is_file() {
                serde_json::from_str(&fs::read_to_string(&side)?)?
            } else {
                serde_json::Value::Null
            };
            (rows, meta)
        }
        ReportFormat::Json => {
            let r: JsonReportFile = serde_json::from_str(&fs::read_to_string(input)?)?;
            (r.rows, r.metadata)
        }
    };
    if rows.is_empty() {
        return Err(CliError::precondition("report has no rows"));
    }
    ensure_parent(out)?;
    let mut outputs = vec![out.to_path_buf()];
    match ReportFormat::from_path(out) {
        ReportFormat::Json => write_json(out, &JsonReportFile { rows, metadata })?,
        ReportFormat::Csv => {
            let mut w =
                csv::Writer::from_path(out).map_err(|e| CliError::precondition(e.to_string()))?;
            let csv_err = |e: csv::Error| CliError::precondition(e.to_string());
            w.write_record(experiments::CSV_HEADER).map_err(csv_err)?;
            for r in &rows {
                w.write_record([
                    r.temperature.map(|t| t.to_string()).unwrap_or_default(),
                    r.synthetic_count.to_string(),
                    r.synthetic_ratio.to_string(),
                    r.auc.to_string(),
                    r.ci_low.to_string(),
                    r.ci_high.to_string(),
                    r.stop_epoch.to_string(),
                ])
                .map_err(csv_err)?;
            }
            w.flush()?;
            if !metadata.is_null() {
                let side = metadata_path(out);
                write_json(&side, &metadata)?;
                outputs.push(side);
            }
        }
    }
    Ok(Done { outputs })
}

fn cmd_record(cfg: &RunConfig, requests: &Path, out_dir: &Path) -> Result<Done, CliError> {
    let reqs: Vec<ChatRequest> = corpus::read_jsonl(requests)?;
    if reqs.is_empty() {
        return Err(CliError::precondition("no requests to record"));
    }
    for r in &reqs {
        r.validate()?;
    }
    let transport = HttpTransport::from_env()?;
    let store = gateway::record_session(Box::new(transport), cfg.gateway.retry, reqs, out_dir)?;
    log::info!("{} fixtures in {}", store.len()?, out_dir.display());
    Ok(Done {
        outputs: vec![out_dir.to_path_buf()],
    })
}
