use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Generate synthetic QA training data with a chat model and evaluate
/// fine-tuned answerers.
#[derive(Debug, Parser)]
#[command(name = "qagen", disable_version_flag = true)]
pub struct Cli {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Print the resolved configuration (after flag overrides) and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    /// Print version information as JSON and exit.
    #[arg(long)]
    pub version: bool,
    /// Log filter level for stderr (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info", value_name = "LEVEL")]
    pub log_level: tracing::Level,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load a raw corpus, sample contexts and write canonical files.
    Ingest(IngestArgs),
    /// Generate QA pairs for every context (resumable).
    Synthesize(SynthesizeArgs),
    /// Write a fine-tuning JSONL from synthesized or gold pairs.
    EmitTrain(EmitTrainArgs),
    /// Write the LoRA hyperparameter grid.
    Grid(GridArgs),
    /// Score one run's predictions against the gold set.
    Evaluate(EvaluateArgs),
    /// Score every run of the experiment matrix.
    Matrix(MatrixArgs),
    /// Create an annotation session in the store directory.
    AnnotateCreate(AnnotateCreateArgs),
    /// Serve the annotation HTTP API.
    AnnotateServe(AnnotateServeArgs),
    /// Render metric reports or annotation results.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IngestSource {
    News,
    Wiki,
    /// SQuAD-format training split.
    Jsquad,
    /// SQuAD-format evaluation split; never sampled.
    JsquadEval,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(long, value_enum)]
    pub source: IngestSource,
    /// Raw input file; overrides the corpus path for the source.
    #[arg(long, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Number of contexts to sample.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Context truncation length in characters.
    #[arg(long)]
    pub truncate: Option<usize>,
    /// Output directory [default: {output.dir}/ingest-{source}].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    ZeroShot,
    OneShot,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    /// Canonical contexts file.
    #[arg(long, value_name = "FILE")]
    pub contexts: Option<PathBuf>,
    /// QA pairs requested per context.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Serve completions from this mock script instead of the HTTP endpoint.
    #[arg(long, value_name = "FILE")]
    pub mock: Option<PathBuf>,
    #[arg(long)]
    pub concurrency: Option<usize>,
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Seed forwarded to the chat endpoint.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub label: Option<String>,
    /// Output directory [default: {output.dir}/{label}].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[group(id = "pairs", required = true, multiple = false)]
pub struct PairSource {
    /// Synthesis output to draw accepted pairs from.
    #[arg(long, value_name = "FILE", group = "pairs")]
    pub synthesis: Option<PathBuf>,
    /// Canonical gold file (human-written pairs).
    #[arg(long, value_name = "FILE", group = "pairs")]
    pub gold: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmitTrainArgs {
    #[command(flatten)]
    pub pairs: PairSource,
    /// Canonical contexts file the pairs refer to.
    #[arg(long, value_name = "FILE")]
    pub contexts: Option<PathBuf>,
    /// Output directory [default: {output.dir}/train].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Use the original search space, ignoring configured and flag sets.
    #[arg(long)]
    pub paper_faithful: bool,
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub batch_size: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub learning_rate: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub epochs: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub lora_r: Option<Vec<u32>>,
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub lora_alpha: Option<Vec<u32>>,
    /// Output directory [default: {output.dir}/grid].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EmbeddingArg {
    Hash,
    Fixture,
    Http,
}

#[derive(Debug, Args)]
pub struct MetricArgs {
    /// BLEU tokenizer: char or whitespace.
    #[arg(long)]
    pub tokenizer: Option<String>,
    /// BLEU smoothing: none, exp or floor.
    #[arg(long)]
    pub smoothing: Option<String>,
    #[arg(long, value_enum)]
    pub embeddings: Option<EmbeddingArg>,
    /// Embedding fixture JSONL for `--embeddings fixture`.
    #[arg(long, value_name = "FILE")]
    pub embeddings_fixture: Option<PathBuf>,
    /// Canonical gold file.
    #[arg(long, value_name = "FILE")]
    pub gold: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Predictions JSONL (`question_id`, `answer`).
    #[arg(long, value_name = "FILE")]
    pub predictions: PathBuf,
    /// Run label from the experiment matrix [default: predictions file stem].
    #[arg(long)]
    pub run: Option<String>,
    #[command(flatten)]
    pub metrics: MetricArgs,
    /// Output directory [default: {output.dir}/eval-{run}].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    /// Directory holding `{label}.jsonl` prediction files.
    #[arg(long, value_name = "DIR")]
    pub predictions_dir: Option<PathBuf>,
    #[command(flatten)]
    pub metrics: MetricArgs,
    /// Output directory [default: {output.dir}/matrix].
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AssignArg {
    Partitioned,
    Overlap,
}

#[derive(Debug, Args)]
pub struct AnnotateCreateArgs {
    /// `NAME=PREDICTIONS.jsonl`; repeat to interleave several systems.
    #[arg(long = "system", value_name = "NAME=FILE", required = true)]
    pub systems: Vec<String>,
    /// Canonical gold file supplying questions.
    #[arg(long, value_name = "FILE")]
    pub gold: Option<PathBuf>,
    /// Canonical contexts file supplying context text.
    #[arg(long, value_name = "FILE")]
    pub contexts: Option<PathBuf>,
    #[arg(long)]
    pub session_id: Option<String>,
    #[arg(long, value_delimiter = ',', value_name = "LIST")]
    pub judges: Option<Vec<String>>,
    #[arg(long)]
    pub sample_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value = "partitioned")]
    pub mode: AssignArg,
    /// Session store directory.
    #[arg(long, value_name = "DIR")]
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnnotateServeArgs {
    /// Listen address; port 0 picks a free port.
    #[arg(long)]
    pub bind: Option<String>,
    /// Session store directory.
    #[arg(long, value_name = "DIR")]
    pub dir: Option<PathBuf>,
    #[arg(long)]
    pub cors_origin: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Markdown,
    Csv,
    Json,
}

#[derive(Debug, Args)]
#[group(id = "what", required = true, multiple = false)]
pub struct ReportSource {
    /// Metric report JSON written by `evaluate` or `matrix`.
    #[arg(long, value_name = "FILE", group = "what")]
    pub input: Option<PathBuf>,
    /// Annotation session whose per-system accuracy to report.
    #[arg(long, group = "what")]
    pub session: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub source: ReportSource,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: FormatArg,
    /// Session store directory for `--session`.
    #[arg(long, value_name = "DIR")]
    pub dir: Option<PathBuf>,
    /// Write here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(cli.log_level).with_target(false).init();
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
