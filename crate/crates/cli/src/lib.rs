//! `qcompare` command-line front end.
//!
//! Exit status: 0 on success, 2 on usage errors (unknown subcommand or
//! flag, missing or conflicting settings, unknown client/provider names),
//! 1 on any other failure. Failures print one JSON line to stderr:
//! `{"error": "<kind>", "message": "<text>"}`.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub mod commands;
pub mod config;
pub mod registry;

use config::{ConfigFile, Settings};
use qcompare_core::corpus::{file_digest, text_digest};

#[derive(Debug, Parser)]
#[command(name = "qcompare", version, about = "Build and evaluate multi-image quality comparison data", arg_required_else_help = true)]
pub struct Cli {
    /// Flat key = value settings file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the resolved plan and exit without side effects.
    #[arg(long, global = true)]
    pub dry_run: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw random pairs, triples and quads from an image manifest.
    Sample(SampleArgs),
    /// Drop groups whose descriptions are too similar.
    Filter(FilterArgs),
    /// Merge member descriptions into comparisons with a text-only LLM.
    Merge(MergeArgs),
    /// Collect teacher comparisons or Q&A on image groups.
    #[command(subcommand)]
    Teach(TeachCommand),
    /// Render subsets into one interleaved training file.
    Assemble(AssembleArgs),
    /// Benchmark evaluation.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Run the review HTTP service.
    ReviewServe(ServeArgs),
    /// Talk to a running review service.
    #[command(subcommand)]
    Review(ReviewCommand),
    /// Count items per subset and group size.
    Stats(StatsArgs),
    /// Check whether a multi-image prompt fits a context window.
    Budget(BudgetArgs),
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub triples: Option<usize>,
    #[arg(long)]
    pub quads: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub descs: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub removed: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub target_retention: Option<f64>,
    #[arg(long)]
    pub provider: Option<String>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub embed_cache: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub in_flight: Option<usize>,
    /// Optional JSON report with tau and retention per group size.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ClientOpts {
    #[arg(long)]
    pub client: Option<String>,
    #[arg(long)]
    pub in_flight: Option<usize>,
    /// Append-only response cache file.
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub retries: Option<usize>,
    /// Image limit for remote clients.
    #[arg(long)]
    pub max_images: Option<usize>,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    #[command(flatten)]
    pub client: ClientOpts,
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub descs: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum TeachCommand {
    /// Open-ended comparisons on image groups.
    General(TeachGeneralArgs),
    /// Q&A records converted to MCQ and direct-answer items.
    Qa(TeachQaArgs),
}

#[derive(Debug, Args)]
pub struct TeachGeneralArgs {
    #[command(flatten)]
    pub client: ClientOpts,
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TeachQaArgs {
    #[command(flatten)]
    pub client: ClientOpts,
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated aspect list.
    #[arg(long)]
    pub aspects: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the raw Q&A records here.
    #[arg(long)]
    pub qa_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AssembleArgs {
    #[arg(long)]
    pub fmt: Option<String>,
    /// `name=path`, repeatable.
    #[arg(long = "subset")]
    pub subsets: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub stats: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Multiple-choice accuracy.
    Mcq(McqArgs),
    /// Judge-scored free-form answers.
    Judge(JudgeArgs),
    /// Forced-choice preferences, swap consistency and MAP scores.
    #[command(name = "2afc")]
    TwoAfc(TwoAfcArgs),
    /// Weighted average of one metric over several 2afc reports.
    Combine(CombineArgs),
}

#[derive(Debug, Args)]
pub struct McqArgs {
    #[command(flatten)]
    pub client: ClientOpts,
    /// Benchmark file, one MCQ record per line.
    #[arg(long)]
    pub bench: Option<PathBuf>,
    /// Benchmark name; defaults to the file stem. `micbench` enables the
    /// published shape check.
    #[arg(long)]
    pub bench_name: Option<String>,
    /// Separate answer keys for hidden splits.
    #[arg(long)]
    pub keys: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub fmt: Option<String>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub responses_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct JudgeArgs {
    #[arg(long)]
    pub golden: Option<PathBuf>,
    #[arg(long)]
    pub responses: Option<PathBuf>,
    #[arg(long)]
    pub judge: Option<String>,
    #[arg(long)]
    pub retries: Option<usize>,
    #[arg(long)]
    pub in_flight: Option<usize>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub scores_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TwoAfcArgs {
    #[command(flatten)]
    pub client: ClientOpts,
    /// Two-image groups, one per line.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// `{"image_id", "mos"}` per line.
    #[arg(long)]
    pub mos: Option<PathBuf>,
    #[arg(long = "prior-var")]
    pub prior_variance: Option<f64>,
    #[arg(long)]
    pub fmt: Option<String>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub records_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CombineArgs {
    #[arg(long = "report", required = true)]
    pub reports: Vec<PathBuf>,
    /// `pearson`, `chance_corrected` or `raw`.
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub review_dir: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<String>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ServiceOpts {
    #[arg(long)]
    pub service_url: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum ReviewCommand {
    /// Upload a blinded kept/removed spot-check batch.
    CreateBatch(CreateBatchArgs),
    /// Per-arm correctness rates.
    Report(ReportArgs),
    /// Queue MCQ records for cross-examination.
    Crossexam(CrossexamArgs),
    /// List unresolved cross-examination tasks.
    Pending(ServiceOpts),
}

#[derive(Debug, Args)]
pub struct CreateBatchArgs {
    #[command(flatten)]
    pub service: ServiceOpts,
    #[arg(long)]
    pub batch: Option<String>,
    /// Merged items from kept groups.
    #[arg(long)]
    pub kept: Option<PathBuf>,
    /// Merged items from removed groups.
    #[arg(long)]
    pub removed: Option<PathBuf>,
    #[arg(long)]
    pub descs: Option<PathBuf>,
    #[arg(short, long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub service: ServiceOpts,
    #[arg(long)]
    pub batch: Option<String>,
}

#[derive(Debug, Args)]
pub struct CrossexamArgs {
    #[command(flatten)]
    pub service: ServiceOpts,
    #[arg(long)]
    pub bench: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    /// `name=path`, repeatable.
    #[arg(long = "subset")]
    pub subsets: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BudgetArgs {
    #[arg(long)]
    pub tokens_per_image: Option<usize>,
    #[arg(long)]
    pub context_window: Option<usize>,
    #[arg(long)]
    pub images: Option<usize>,
    #[arg(long)]
    pub text_tokens: Option<usize>,
    /// Count text tokens from this text instead (whitespace split).
    #[arg(long)]
    pub text: Option<String>,
}

/// Marks an error as a usage problem (exit 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Per-run state shared by all subcommands.
pub struct Ctx<'a> {
    pub settings: Settings,
    pub dry_run: bool,
    pub out: &'a mut dyn Write,
    pub command: String,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

#[derive(Serialize)]
struct Plan<'a> {
    dry_run: bool,
    command: &'a str,
    settings: std::collections::BTreeMap<String, serde_json::Value>,
    inputs: Vec<serde_json::Value>,
    outputs: &'a [PathBuf],
}

#[derive(Debug, Serialize, serde::Deserialize, PartialEq)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_digest: String,
    pub settings: std::collections::BTreeMap<String, String>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
}

#[derive(Debug, Serialize, serde::Deserialize, PartialEq)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl<'a> Ctx<'a> {
    pub fn new(settings: Settings, dry_run: bool, out: &'a mut dyn Write, command: &str) -> Self {
        Self {
            settings,
            dry_run,
            out,
            command: command.to_string(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, p: &Path) -> PathBuf {
        self.inputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    pub fn output(&mut self, p: &Path) -> PathBuf {
        self.outputs.push(p.to_path_buf());
        p.to_path_buf()
    }

    /// In dry-run mode prints the plan and returns `true`; the caller then
    /// stops before any side effect.
    pub fn plan(&mut self) -> Result<bool> {
        if !self.dry_run {
            return Ok(false);
        }
        let plan = Plan {
            dry_run: true,
            command: &self.command,
            settings: self.settings.resolved(),
            inputs: self
                .inputs
                .iter()
                .map(|p| serde_json::json!({"path": p, "exists": p.exists()}))
                .collect(),
            outputs: &self.outputs,
        };
        writeln!(self.out, "{}", serde_json::to_string(&plan)?)?;
        Ok(true)
    }

    pub fn emit<T: Serialize>(&mut self, value: &T) -> Result<()> {
        writeln!(self.out, "{}", serde_json::to_string(value)?)?;
        Ok(())
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        let settings: std::collections::BTreeMap<String, String> = self
            .settings
            .resolved_values()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let inputs = self
            .inputs
            .iter()
            .map(|p| {
                Ok(InputDigest {
                    path: p.clone(),
                    sha256: file_digest(p)?,
                })
            })
            .collect::<Result<Vec<_>, qcompare_core::corpus::CorpusError>>()?;
        Ok(RunManifest {
            tool: "qcompare".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: self.command.clone(),
            config_digest: text_digest(&serde_json::to_string(&settings)?),
            settings,
            inputs,
            outputs: self.outputs.clone(),
        })
    }

    /// Writes `<first output>.manifest.json`.
    pub fn write_manifest(&self) -> Result<Option<PathBuf>> {
        let Some(first) = self.outputs.first() else {
            return Ok(None);
        };
        let path = manifest_path(first);
        std::fs::write(&path, serde_json::to_string_pretty(&self.manifest()?)? + "\n")?;
        Ok(Some(path))
    }
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

/// Runs one invocation; `argv[0]` is the program name.
pub fn dispatch_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            let _ = if code == 0 { out.write_all(rendered.as_bytes()) } else { err.write_all(rendered.as_bytes()) };
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let is_usage = e.downcast_ref::<UsageError>().is_some();
            let line = serde_json::json!({
                "error": if is_usage { "usage" } else { "failed" },
                "message": format!("{e:#}").replace('\n', " "),
            });
            let _ = writeln!(err, "{line}");
            if is_usage {
                2
            } else {
                1
            }
        }
    }
}

pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    dispatch_with(argv, &mut stdout.lock(), &mut stderr.lock())
}

fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let config = match &cli.config {
        Some(p) => ConfigFile::load(p).map_err(|e| usage(format!("{e:#}")))?,
        None => ConfigFile::default(),
    };
    let settings = Settings::new(config);
    commands::run(cli.command, Ctx::new(settings, cli.dry_run, out, ""))
}
